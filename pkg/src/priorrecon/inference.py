"""Scene <-> tensor conversion, prior bundles, and no-grad prediction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import torch

from .config import RenderConfig
from .geomcore import CameraSet, orient_toward_camera
from .gsplat import GaussianCloud, TorchCamera, build_cloud, camera_list, render, voxel_prune
from .model import ALL_HEADS, ReconstructionModel, camera_vectors, cameras_from_vectors
from .priors import DEPTH, INTRINSICS, POSE, PriorBundle
from .synthdata import SceneSample


@dataclass
class SceneTensors:
    images: torch.Tensor      # (N, 3, H, W)
    rgb: torch.Tensor         # (N, H, W, 3)
    depths: torch.Tensor      # (N, H, W)
    normals: torch.Tensor     # (N, H, W, 3)
    pointmaps: torch.Tensor   # (N, H, W, 3)
    valid: torch.Tensor       # (N, H, W) bool
    cam_vecs: torch.Tensor    # (N, 9)
    cams: list                # TorchCamera per view


def scene_tensors(sample: SceneSample, dtype=torch.float32) -> SceneTensors:
    rgb = torch.as_tensor(sample.images, dtype=dtype)
    return SceneTensors(
        images=rgb.permute(0, 3, 1, 2).contiguous(),
        rgb=rgb,
        depths=torch.as_tensor(sample.depths, dtype=dtype),
        normals=torch.as_tensor(sample.normals, dtype=dtype),
        pointmaps=torch.as_tensor(sample.pointmaps, dtype=dtype),
        valid=torch.as_tensor(sample.valid),
        cam_vecs=torch.as_tensor(camera_vectors(sample.cams), dtype=dtype),
        cams=camera_list(sample.cams, dtype),
    )


def full_priors(sample: SceneSample) -> PriorBundle:
    """Ground-truth pose, intrinsics and depth priors for every view."""
    return PriorBundle(list(sample.cams.poses), list(sample.cams.intrinsics),
                       [np.asarray(d, dtype=np.float64) for d in sample.depths])


def priors_for(sample: SceneSample, modalities: Iterable[str]) -> Optional[PriorBundle]:
    """Bundle with only the named modalities (``pose``, ``intrinsics``, ``depth``)."""
    mods = set(modalities)
    unknown = mods - {"pose", "intrinsics", "depth"}
    if unknown:
        raise ValueError(f"unknown prior modalities {sorted(unknown)}")
    if not mods:
        return None
    keep = np.zeros((sample.num_views, 3), dtype=bool)
    keep[:, POSE] = "pose" in mods
    keep[:, INTRINSICS] = "intrinsics" in mods
    keep[:, DEPTH] = "depth" in mods
    return full_priors(sample).masked(keep)


@torch.no_grad()
def predict(model: ReconstructionModel, images: torch.Tensor, priors: Optional[PriorBundle] = None,
            heads=ALL_HEADS) -> dict:
    """Numpy predictions for one scene; cameras come back as a CameraSet."""
    was_training = model.training
    model.eval()
    out = model(images, priors, heads)
    model.train(was_training)
    res = {}
    for k, v in out.items():
        if k == "gs_attrs":
            res[k] = {a: t for a, t in v.items()}
        else:
            res[k] = v.cpu().numpy().astype(np.float64)
    if "camera" in res:
        H, W = images.shape[-2:]
        res["cameras"] = cameras_from_vectors(res["camera"], W, H)
        if "normals" in res:
            # the training loss ignores the sign of a normal; report them camera-facing like the labels
            res["normals"] = np.stack([orient_toward_camera(n, k)
                                       for n, k in zip(res["normals"], res["cameras"].intrinsics)])
    return res


def cloud_from_prediction(pred: dict, cams: list, render_cfg: RenderConfig,
                          views: Optional[list] = None) -> GaussianCloud:
    gs_depth = torch.as_tensor(pred["gs_depth"], dtype=torch.float32)
    attrs = {k: v.float() for k, v in pred["gs_attrs"].items()}
    cloud = build_cloud(gs_depth, attrs, cams, views)
    return voxel_prune(cloud, render_cfg.voxel_size)


def render_cameras(cloud: GaussianCloud, cams: list, render_cfg: RenderConfig) -> list:
    return [render(cloud, c, render_cfg.background, render_cfg.dilation, render_cfg.mode) for c in cams]


def torch_cameras(cams: CameraSet) -> list:
    return camera_list(cams)


__all__ = ["SceneTensors", "scene_tensors", "full_priors", "priors_for", "predict", "cloud_from_prediction",
           "render_cameras", "torch_cameras", "TorchCamera"]
