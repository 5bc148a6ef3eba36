"""Curriculum training: staged heads and freezing, per-group learning rates,
cosine schedules, prior dropout, atomic checkpoints and resumable runs.

One optimisation step consumes one scene (all of its views). Every random
choice in a step draws from a generator seeded by ``(seed, stage, step)``, so
a resumed run replays the exact same sequence as an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import pickle
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import ConfigError, RunConfig, StageConfig, config_from_dict, save_config
from .gsplat import TorchCamera, build_cloud, novel_view_mask, render, select_split, voxel_prune
from .inference import SceneTensors, full_priors, scene_tensors
from .losses import (TrainingFault, camera_loss, confidence_mask, depth_loss, gradient_consistency_loss,
                     gs_depth_loss, normal_loss, point_loss, rgb_loss, total_loss)
from .model import PARAM_GROUPS, ReconstructionModel
from .priors import sample_prior_mask
from .synthdata import SceneSample, generate_scene, sample_resolution

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "stage", "epoch", "lr", "points", "depth", "cam", "normal",
               "rgb", "gsdepth", "consis", "gs", "total")


class CheckpointError(RuntimeError):
    pass


_LOAD_ERRORS = (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError)


# --------------------------------------------------------------------------
# parameter groups and schedule


def build_param_groups(model: ReconstructionModel, plan) -> list:
    """``[{"name", "params", "lr"}]`` covering every parameter exactly once."""
    groups = model.param_groups()
    seen: dict[int, str] = {}
    for name, params in groups.items():
        for p in params:
            if id(p) in seen:
                raise ConfigError(f"parameter assigned to both {seen[id(p)]!r} and {name!r}")
            seen[id(p)] = name
    missing = [n for n, p in model.named_parameters() if id(p) not in seen]
    if missing:
        raise ConfigError(f"parameters outside every group: {missing}")
    unknown = set(plan.group_lrs) ^ set(groups)
    if unknown:
        raise ConfigError(f"group_lrs keys {sorted(plan.group_lrs)} do not match groups {sorted(groups)}")
    return [{"name": n, "params": groups[n], "lr": plan.group_lrs[n] * plan.lr_scale} for n in groups]


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    c = 0.5 * (1.0 + math.cos(math.pi * step / total)) if total > 0 else 1.0
    # convex combination keeps both endpoints exact (c is exactly 1 and 0 there)
    return lr_max * c + lr_min * (1.0 - c)


def trainable_parameters(model: ReconstructionModel, stage: StageConfig) -> set:
    """Ids of the parameters a stage may update."""
    if stage.trainable_modules:
        for m in stage.trainable_modules:
            if not hasattr(model, m):
                raise ConfigError(f"stage {stage.name}: unknown module {m!r}")
        ids = {id(p) for m in stage.trainable_modules for p in getattr(model, m).parameters()}
    else:
        ids = {id(p) for p in model.parameters()}
    groups = model.param_groups()
    for g in stage.frozen_groups:
        if g not in groups:
            raise ConfigError(f"stage {stage.name}: unknown parameter group {g!r}")
        ids -= {id(p) for p in groups[g]}
    return ids


def _atomic_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


# --------------------------------------------------------------------------
# the loop


class Trainer:
    """Runs the configured curriculum over a fixed list of scenes.

    With ``cfg.data.dynamic_resolution`` each step re-generates its scene from
    the stored seed at a resolution drawn from the policy scaled by the stage's
    ``resolution_multiplier``; otherwise scenes are used as given.
    """

    def __init__(self, cfg: RunConfig, scenes: Sequence[SceneSample], out_dir: Optional[str | os.PathLike] = None,
                 model: Optional[ReconstructionModel] = None, use_priors: bool = True):
        if not scenes:
            raise ValueError("no training scenes")
        self.cfg = cfg
        self.scenes = list(scenes)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.use_priors = use_priors
        if model is None:
            torch.manual_seed(cfg.seed)
            model = ReconstructionModel(cfg.model)
        self.model = model
        self.groups = build_param_groups(model, cfg.plan)
        self.stage_idx = 0
        self.stage_step = 0
        self.global_step = 0
        self.optimizer: Optional[torch.optim.Optimizer] = None
        self.history: list = []
        self._tensors: dict = {}
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            save_config(cfg, self.out_dir / "config.json")

    # -- bookkeeping ------------------------------------------------------------

    @property
    def stages(self) -> list:
        return self.cfg.plan.stages

    def stage_steps(self, idx: int) -> int:
        return self.stages[idx].epochs * len(self.scenes)

    @property
    def total_steps(self) -> int:
        return sum(self.stage_steps(i) for i in range(len(self.stages)))

    def _prepare_stage(self, idx: int) -> None:
        stage = self.stages[idx]
        ids = trainable_parameters(self.model, stage)
        for p in self.model.parameters():
            p.requires_grad_(id(p) in ids)
        pg = []
        for g in self.groups:
            params = [p for p in g["params"] if p.requires_grad]
            if params:
                pg.append({"name": g["name"], "params": params, "lr": g["lr"], "base_lr": g["lr"]})
        if not pg:
            raise ConfigError(f"stage {stage.name} has no trainable parameters")
        self.optimizer = torch.optim.AdamW(pg, weight_decay=self.cfg.plan.weight_decay)

    def _set_lr(self, idx: int, step: int) -> float:
        total = self.stage_steps(idx)
        for g in self.optimizer.param_groups:
            g["lr"] = cosine_lr(step, total, g["base_lr"], g["base_lr"] * self.cfg.plan.min_lr_ratio)
        return self.optimizer.param_groups[0]["lr"]

    def _scene_for(self, idx: int, step: int, rng: np.random.Generator) -> tuple[SceneSample, SceneTensors]:
        n = len(self.scenes)
        epoch, k = divmod(step, n)
        order = np.random.default_rng([self.cfg.seed, idx, epoch, 1]).permutation(n)
        j = int(order[k])
        scene = self.scenes[j]
        data = self.cfg.data
        if data.dynamic_resolution:
            mult = data.policy.multiplier * self.stages[idx].resolution_multiplier
            h, w = sample_resolution(data.policy, rng, self.cfg.model.patch_size, mult)
            if (h, w) != scene.images.shape[1:3]:
                scene = generate_scene(scene.seed, scene.num_views, h, w, scene.spec)
                return scene, scene_tensors(scene)
        if j not in self._tensors:
            self._tensors[j] = scene_tensors(scene)
        return scene, self._tensors[j]

    # -- one step ---------------------------------------------------------------

    def compute_terms(self, stage: StageConfig, scene: SceneSample, t: SceneTensors,
                      rng: np.random.Generator) -> dict:
        cfg, w = self.cfg, self.cfg.losses
        keep = sample_prior_mask(scene.num_views, cfg.prior_dropout_p, rng)
        priors = full_priors(scene).masked(keep) if self.use_priors else None
        active = set(stage.active_heads)
        heads = set(active)
        if "gs" in active:
            heads.add("depth")
            if cfg.render.use_predicted_cameras:
                heads.add("camera")
        pred = self.model(t.images, priors, heads)
        terms = {}
        if "point" in active:
            terms["points"] = point_loss(pred["pointmap"], t.pointmaps, pred["point_conf"], t.valid, w.alpha)
        if "depth" in active:
            terms["depth"] = depth_loss(pred["depth"], t.depths, pred["depth_conf"], t.valid, w.alpha)
        if "camera" in active:
            terms["cam"] = camera_loss(pred["camera"], t.cam_vecs, w.huber_delta)
        if "normal" in active:
            terms["normal"] = normal_loss(pred["normals"], t.normals, t.valid, w.angle)
        if "gs" in active:
            terms.update(self._gs_terms(scene, t, pred, rng))
        return terms

    def _gs_terms(self, scene: SceneSample, t: SceneTensors, pred: dict, rng: np.random.Generator) -> dict:
        rc, w = self.cfg.render, self.cfg.losses
        N, H, W = t.depths.shape
        split = select_split(list(scene.depths), scene.cams, rc.split_candidates, rng, tol=rc.visibility_tol)
        if rc.use_predicted_cameras:
            cams = [TorchCamera.from_vector(pred["camera"][i], W, H) for i in range(N)]
        else:
            cams = t.cams
        cloud = build_cloud(pred["gs_depth"], pred["gs_attrs"], cams, split.context_ids, t.valid)
        cloud = voxel_prune(cloud, rc.voxel_size)
        out = [render(cloud, cams[v], rc.background, rc.dilation, rc.mode) for v in range(N)]
        image = torch.stack([o["image"] for o in out])
        rdepth = torch.stack([o["depth"] for o in out])
        alpha = torch.stack([o["alpha"] for o in out])
        context = [(scene.depths[c], scene.cams.poses[c], scene.cams.intrinsics[c]) for c in split.context_ids]
        vis = np.stack([novel_view_mask(scene.depths[v], scene.cams.poses[v], scene.cams.intrinsics[v],
                                        context, rc.visibility_tol) for v in range(N)])
        vis = torch.as_tensor(vis) & t.valid
        ones = torch.ones_like(pred["gs_depth"])
        cmask = confidence_mask(pred["depth_conf"], w.conf_quantile) & (alpha.detach() > 0.5)
        return {
            "rgb": rgb_loss(image, t.rgb, vis, w.lpips),
            "gsdepth": gs_depth_loss(pred["gs_depth"], t.depths, ones, t.valid, w.alpha),
            "consis": gradient_consistency_loss(rdepth, pred["depth"].detach(), cmask),
        }

    def train_step(self, idx: int, step: int) -> dict:
        stage = self.stages[idx]
        rng = np.random.default_rng([self.cfg.seed, idx, self.global_step])
        scene, t = self._scene_for(idx, step, rng)
        lr = self._set_lr(idx, step)
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        terms = self.compute_terms(stage, scene, t, rng)
        total, breakdown = total_loss(terms, self.cfg.losses)
        total.backward()
        params = [p for g in self.optimizer.param_groups for p in g["params"]]
        norm = torch.nn.utils.clip_grad_norm_(params, self.cfg.plan.grad_clip)
        if not torch.isfinite(norm):
            raise TrainingFault("grad_norm", float(norm))
        self.optimizer.step()
        row = {"step": self.global_step, "stage": stage.name, "epoch": step // len(self.scenes), "lr": lr}
        row.update(breakdown)
        return row

    # -- driving ----------------------------------------------------------------

    def run(self, max_steps: Optional[int] = None) -> ReconstructionModel:
        """Train through the remaining curriculum. ``max_steps`` stops early
        (after that many global steps) and leaves a resumable checkpoint."""
        while self.stage_idx < len(self.stages):
            if not self.run_stage(self.stage_idx, max_steps):
                return self.model
        return self.model

    def run_stage(self, idx: int, max_steps: Optional[int] = None) -> bool:
        """Continue stage ``idx`` from the current position; True when it completed."""
        if idx != self.stage_idx:
            raise ValueError(f"stage {idx} requested but the run is at stage {self.stage_idx}")
        stage = self.stages[idx]
        if self.optimizer is None:
            self._prepare_stage(idx)
        total = self.stage_steps(idx)
        log.info("stage %s: steps %d..%d", stage.name, self.stage_step, total)
        while self.stage_step < total:
            if max_steps is not None and self.global_step >= max_steps:
                self.checkpoint("last")
                return False
            row = self.train_step(idx, self.stage_step)
            self.stage_step += 1
            self.global_step += 1
            self._record(row)
            if self.cfg.checkpoint_every and self.global_step % self.cfg.checkpoint_every == 0:
                self.checkpoint("last")
        self.stage_idx += 1
        self.stage_step = 0
        self.optimizer = None
        self.checkpoint(f"stage{idx}_{stage.name}")
        self.checkpoint("last")
        return True

    def _record(self, row: dict) -> None:
        self.history.append(row)
        if self.cfg.log_every and row["step"] % self.cfg.log_every == 0:
            log.info("step %d [%s] total %.5f", row["step"], row["stage"], row["total"])
        if self.out_dir is None:
            return
        path = self.out_dir / "losses.csv"
        new = not path.exists()
        with open(path, "a", newline="") as f:
            wr = csv.DictWriter(f, LOG_COLUMNS, extrasaction="ignore")
            if new:
                wr.writeheader()
            wr.writerow(row)

    # -- checkpoints ------------------------------------------------------------

    def state(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "scene_seeds": [s.seed for s in self.scenes],
            "model": self.model.state_dict(),
            "optimizer": None if self.optimizer is None else self.optimizer.state_dict(),
            "stage_idx": self.stage_idx,
            "stage_step": self.stage_step,
            "global_step": self.global_step,
            "torch_rng": torch.get_rng_state(),
        }

    def checkpoint(self, name: str) -> Optional[Path]:
        if self.out_dir is None:
            return None
        path = self.out_dir / "checkpoints" / f"{name}.pt"
        _atomic_save(self.state(), path)
        manifest = self.out_dir / "checkpoints" / "manifest.json"
        doc = json.loads(manifest.read_text()) if manifest.exists() else {}
        doc[name] = {"global_step": self.global_step, "stage_idx": self.stage_idx, "stage_step": self.stage_step}
        tmp = manifest.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
        os.replace(tmp, manifest)
        return path

    def load_state(self, state: dict) -> None:
        if state.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {state.get('version')} != {CHECKPOINT_VERSION}")
        if state["config"]["model"] != self.cfg.to_dict()["model"]:
            raise CheckpointError("checkpoint model config differs from the run config")
        if state["scene_seeds"] != [s.seed for s in self.scenes]:
            raise CheckpointError("checkpoint was trained on a different scene list")
        try:
            self.model.load_state_dict(state["model"])
        except RuntimeError as exc:
            raise CheckpointError(str(exc)) from exc
        self.stage_idx, self.stage_step, self.global_step = state["stage_idx"], state["stage_step"], state["global_step"]
        torch.set_rng_state(state["torch_rng"])
        self.optimizer = None
        if state["optimizer"] is not None and self.stage_idx < len(self.stages):
            self._prepare_stage(self.stage_idx)
            self.optimizer.load_state_dict(state["optimizer"])
        self._truncate_log()

    def _truncate_log(self) -> None:
        if self.out_dir is None or not (self.out_dir / "losses.csv").exists():
            return
        path = self.out_dir / "losses.csv"
        with open(path, newline="") as f:
            rows = [r for r in csv.DictReader(f) if int(r["step"]) < self.global_step]
        with open(path, "w", newline="") as f:
            wr = csv.DictWriter(f, LOG_COLUMNS)
            wr.writeheader()
            wr.writerows(rows)

    @classmethod
    def resume(cls, ckpt: str | os.PathLike, scenes: Sequence[SceneSample], out_dir=None,
               cfg: Optional[RunConfig] = None) -> "Trainer":
        try:
            state = torch.load(ckpt, map_location="cpu", weights_only=False)
        except _LOAD_ERRORS as exc:
            raise CheckpointError(f"cannot read checkpoint {ckpt}: {exc}") from exc
        cfg = cfg or config_from_dict(state["config"])
        tr = cls(cfg, scenes, out_dir)
        tr.load_state(state)
        return tr


def load_model(ckpt: str | os.PathLike) -> tuple[ReconstructionModel, RunConfig]:
    """Model weights and config from any trainer checkpoint."""
    try:
        state = torch.load(ckpt, map_location="cpu", weights_only=False)
        cfg = config_from_dict(state["config"])
        model = ReconstructionModel(cfg.model)
        model.load_state_dict(state["model"])
    except _LOAD_ERRORS + (KeyError,) as exc:
        raise CheckpointError(f"cannot load model from {ckpt}: {exc}") from exc
    model.eval()
    return model, cfg


__all__ = ["CheckpointError", "Trainer", "build_param_groups", "cosine_lr", "trainable_parameters",
           "load_model", "PARAM_GROUPS", "LOG_COLUMNS"]
