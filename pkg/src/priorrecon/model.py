"""The full prior-promptable reconstruction network."""

from __future__ import annotations

from typing import Iterable, Optional

import numpy as np
import torch
from torch import nn

from .backbone import AlternatingBackbone, PatchEmbed, expand_levels
from .config import ModelConfig
from .geomcore import CameraSet, Intrinsics, Pose
from .heads import CameraHead, DenseHead, GaussianAttributeHead
from .priors import PriorBundle, PriorEncoder, TokenGrid, assemble_prompt

ALL_HEADS = ("point", "depth", "camera", "normal", "gs")

# parameter-group membership by top-level submodule
PARAM_GROUPS = {
    "patch_embed": ("patch_embed",),
    "core": ("backbone", "point_head", "depth_head", "camera_head"),
    "new": ("prior_encoder", "normal_head", "gs_head", "gs_attr"),
}


class ReconstructionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.token_dim
        self.patch_embed = PatchEmbed(D, cfg.patch_size, cfg.max_grid)
        self.prior_encoder = PriorEncoder(D, cfg.patch_size, cfg.prior_embedding)
        self.backbone = AlternatingBackbone(cfg)
        self.point_head = DenseHead("point", D, cfg.head_features)
        self.depth_head = DenseHead("depth", D, cfg.head_features)
        self.normal_head = DenseHead("normal", D, cfg.head_features)
        self.gs_head = DenseHead("gs", D, cfg.head_features, cfg.gs_feature_dim)
        self.gs_attr = GaussianAttributeHead(cfg.gs_feature_dim, cfg.s_max)
        self.camera_head = CameraHead(D, cfg.heads, cfg.camera_head_layers, cfg.mlp_ratio, cfg.norm)

    def prompt(self, images: torch.Tensor, priors: Optional[PriorBundle] = None) -> TokenGrid:
        N, _, H, W = images.shape
        hp, wp = self.patch_embed.grid(H, W)
        img_tokens = self.patch_embed(images)
        cam, intr, add = self.prior_encoder(priors, N, H, W, img_tokens)
        return assemble_prompt(img_tokens, cam, intr, add, hp, wp)

    def forward(self, images: torch.Tensor, priors: Optional[PriorBundle] = None,
                heads: Iterable[str] = ALL_HEADS) -> dict:
        """``images``: (N, 3, H, W) in [0, 1], one scene. Returns a dict of predictions."""
        heads = set(heads)
        N, _, H, W = images.shape
        grid = self.prompt(images, priors)
        out = self.backbone(grid.sequence())
        levels = expand_levels(out.levels)
        pred = {}
        for kind, head in (("point", self.point_head), ("depth", self.depth_head),
                           ("normal", self.normal_head), ("gs", self.gs_head)):
            if kind in heads:
                pred.update(head(levels, grid.hp, grid.wp, H, W))
        if "gs" in heads:
            pred["gs_attrs"] = self.gs_attr(pred.pop("gs_features"), images)
        if "camera" in heads:
            pred["camera"] = self.camera_head(out.cam_tokens)
        return pred

    def param_groups(self) -> dict:
        return {name: [p for m in mods for p in getattr(self, m).parameters()]
                for name, mods in PARAM_GROUPS.items()}


# --------------------------------------------------------------------------
# camera vector <-> geometry


def camera_vector(pose: Pose, intr: Intrinsics) -> np.ndarray:
    return np.concatenate([pose.quat, pose.trans, [intr.fx / intr.width, intr.fy / intr.height]])


def camera_vectors(cams: CameraSet) -> np.ndarray:
    return np.stack([camera_vector(p, k) for p, k in zip(cams.poses, cams.intrinsics)])


def cameras_from_vectors(vecs: np.ndarray, width: int, height: int) -> CameraSet:
    """Predicted 9-vectors -> CameraSet with a centred principal point."""
    poses, intrs = [], []
    for v in np.asarray(vecs, dtype=np.float64):
        poses.append(Pose(v[:4], v[4:7]))
        intrs.append(Intrinsics(v[7] * width, v[8] * height, width / 2.0, height / 2.0, width, height))
    return CameraSet(poses, intrs)
