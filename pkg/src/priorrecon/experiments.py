"""Reusable experiment drivers: the desk-scale overfit run and the prior ablation.

Runs are cached under a directory keyed by a hash of their config, the scene
seeds and the package sources, so re-running a finished experiment only
re-evaluates it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .config import CurriculumPlan, DataConfig, ModelConfig, RunConfig, StageConfig
from .evalsuite import MetricReport, evaluate_views
from .gsplat import build_cloud, camera_list, render, voxel_prune
from .inference import predict, priors_for, scene_tensors
from .model import ReconstructionModel
from .synthdata import SceneSample, generate_scene
from .trainer import Trainer

log = logging.getLogger(__name__)

PRIOR_SETTINGS = {"none": (), "pose": ("pose",), "intrinsics": ("intrinsics",), "depth": ("depth",),
                  "all": ("pose", "intrinsics", "depth")}


def source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def run_key(cfg: RunConfig, seeds: Sequence[int], extra: str = "") -> str:
    doc = json.dumps({"cfg": cfg.to_dict(), "seeds": list(seeds), "extra": extra}, sort_keys=True)
    return hashlib.sha256((doc + source_digest()).encode()).hexdigest()[:16]


def overfit_config(epochs: tuple = (350, 200, 100), lr_scale: float = 5.0, views: int = 3,
                   size: int = 32, patch: int = 16, seed: int = 0) -> RunConfig:
    """Desk-scale model (D=192, depth 4) on a handful of fixed-resolution scenes."""
    stages = [
        StageConfig("prior_core", epochs[0], ["point", "depth", "camera"]),
        StageConfig("add_normal", epochs[1], ["point", "depth", "camera", "normal"]),
        StageConfig("gs_only", epochs[2], ["gs"], trainable_modules=["gs_head", "gs_attr"]),
    ]
    return RunConfig(model=ModelConfig(patch_size=patch), plan=CurriculumPlan(stages=stages, lr_scale=lr_scale),
                     data=DataConfig(views=views, height=size, width=size),
                     seed=seed, checkpoint_every=500, log_every=50)


def train_cached(cfg: RunConfig, scenes: Sequence[SceneSample], root: str | Path,
                 tag: str = "run") -> tuple[ReconstructionModel, dict]:
    """Train (or reload) a model; returns it with ``{"dir", "seconds", "steps", "cached"}``."""
    key = run_key(cfg, [s.seed for s in scenes], tag)
    out = Path(root) / f"{tag}_{key}"
    done = out / "done.json"
    if done.exists():
        info = json.loads(done.read_text())
        state = torch.load(out / "model.pt", map_location="cpu", weights_only=True)
        model = ReconstructionModel(cfg.model)
        model.load_state_dict(state)
        return model.eval(), dict(info, cached=True, dir=str(out))
    t0 = time.time()
    last = out / "checkpoints" / "last.pt"
    tr = Trainer.resume(last, scenes, out, cfg) if last.exists() else Trainer(cfg, scenes, out)
    tr.run()
    info = {"seconds": time.time() - t0, "steps": tr.global_step}
    torch.save(tr.model.state_dict(), out / "model.pt")
    done.write_text(json.dumps(info))
    return tr.model.eval(), dict(info, cached=False, dir=str(out))


def render_views(model: ReconstructionModel, sample: SceneSample, pred: Optional[dict] = None,
                 cfg: Optional[RunConfig] = None) -> np.ndarray:
    """Render every view from the cloud built out of all views with ground-truth cameras."""
    cfg = cfg or RunConfig()
    t = scene_tensors(sample)
    with torch.no_grad():
        if pred is None:
            pred = model(t.images, None, ("gs",))
        cloud = build_cloud(torch.as_tensor(pred["gs_depth"], dtype=torch.float32),
                            {k: torch.as_tensor(v, dtype=torch.float32) for k, v in pred["gs_attrs"].items()},
                            t.cams, valid=t.valid)
        cloud = voxel_prune(cloud, cfg.render.voxel_size)
        imgs = [render(cloud, c, cfg.render.background, cfg.render.dilation, cfg.render.mode)["image"]
                for c in camera_list(sample.cams)]
    return torch.stack(imgs).numpy().astype(np.float64)


def evaluate_scene(model: ReconstructionModel, sample: SceneSample, modalities: Iterable[str] = (),
                   tasks: Sequence[str] = ("depth", "points", "pose", "intrinsics", "normal"),
                   cfg: Optional[RunConfig] = None) -> dict:
    t = scene_tensors(sample)
    pred = predict(model, t.images, priors_for(sample, modalities))
    p = {"depth": pred["depth"], "pointmap": pred["pointmap"], "normals": pred["normals"],
         "cameras": pred["cameras"]}
    g = {"depth": sample.depths, "pointmap": sample.pointmaps, "normals": sample.normals,
         "cameras": sample.cams, "valid": sample.valid, "images": sample.images}
    if "nvs" in tasks:
        p["images"] = render_views(model, sample, pred, cfg)
    return evaluate_views(p, g, tasks)


def overfit_experiment(root: str | Path, seeds: Sequence[int] = (0, 1, 2), cfg: Optional[RunConfig] = None) -> dict:
    cfg = cfg or overfit_config()
    scenes = [generate_scene(s, cfg.data.views, cfg.data.height, cfg.data.width) for s in seeds]
    model, info = train_cached(cfg, scenes, root, "overfit")
    per_scene = {f"scene_{s.seed}": evaluate_scene(model, s, (), TASKS_ALL, cfg) for s in scenes}
    report = MetricReport.from_scenes(per_scene, {"priors": "none", "views": "training scenes"})
    return {"report": report, "info": info}


TASKS_ALL = ("depth", "points", "pose", "intrinsics", "normal", "nvs")


def ablation_config(epochs: int = 20, lr_scale: float = 5.0, prior_embedding: str = "single_token",
                    patch: int = 8, seed: int = 0) -> RunConfig:
    """Single prior-prompting stage over many scenes, for the held-out prior comparison."""
    stages = [StageConfig("prior_core", epochs, ["point", "depth", "camera"])]
    return RunConfig(model=ModelConfig(patch_size=patch, prior_embedding=prior_embedding),
                     plan=CurriculumPlan(stages=stages, lr_scale=lr_scale),
                     data=DataConfig(views=3, height=32, width=32), seed=seed,
                     checkpoint_every=500, log_every=100)


def prior_ablation(root: str | Path, cfg: Optional[RunConfig] = None, train_seeds: Sequence[int] = range(200),
                   test_seeds: Sequence[int] = range(10_000, 10_020), settings: Sequence[str] = tuple(PRIOR_SETTINGS),
                   tag: str = "ablation") -> dict:
    """Train once with prior dropout, then evaluate held-out scenes under each prior setting."""
    cfg = cfg or ablation_config()
    d = cfg.data
    train = [generate_scene(s, d.views, d.height, d.width) for s in train_seeds]
    model, info = train_cached(cfg, train, root, tag)
    test = [generate_scene(s, d.views, d.height, d.width) for s in test_seeds]
    reports = {}
    for name in settings:
        per = {f"scene_{s.seed}": evaluate_scene(model, s, PRIOR_SETTINGS[name],
                                                 ("depth", "points", "pose", "intrinsics"), cfg) for s in test}
        reports[name] = MetricReport.from_scenes(per, {"priors": name, "views": "held-out scenes"})
    return {"reports": reports, "info": info}
