"""Evaluation metrics and the report container.

Angles are in degrees and accuracies in percent unless a name says otherwise.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .geomcore import CameraSet, DegenerateAlignmentError, Pose, apply_sim3, rotation_angle_deg, umeyama_align

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5          # 11x11 window
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class ProtocolError(ValueError):
    pass


# --------------------------------------------------------------------------
# geometry


def chamfer_acc_comp(pred: np.ndarray, gt: np.ndarray, align: bool = False) -> dict:
    """Accuracy (pred -> gt) and completion (gt -> pred) nearest-neighbour distances.

    With ``align`` the prediction is first Umeyama-aligned; this needs the two
    sets to be in correspondence (same length and order).
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ProtocolError("chamfer needs two non-empty point sets")
    if align:
        if pred.shape != gt.shape:
            raise ProtocolError("alignment needs corresponding point sets")
        pred = apply_sim3(pred, *umeyama_align(pred, gt))
    acc, _ = cKDTree(gt).query(pred)
    comp, _ = cKDTree(pred).query(gt)
    return {"acc_mean": float(acc.mean()), "acc_median": float(np.median(acc)),
            "comp_mean": float(comp.mean()), "comp_median": float(np.median(comp))}


def _poses(cams) -> list:
    return list(cams.poses) if isinstance(cams, CameraSet) else list(cams)


def _angle_between(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0 if (na < 1e-12 and nb < 1e-12) else 90.0
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b)))


def _rot_angle(R: np.ndarray) -> float:
    return rotation_angle_deg(R)


def relative_pose_errors(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation-direction errors over all pairs ``i < j``."""
    P, G = _poses(pred), _poses(gt)
    if len(P) != len(G):
        raise ProtocolError(f"{len(P)} predicted poses vs {len(G)} ground-truth poses")
    if len(P) < 2:
        raise ProtocolError("pairwise pose metrics need at least two views")
    rot, trans = [], []
    for i in range(len(P)):
        for j in range(i + 1, len(P)):
            rp, rg = P[j].compose(P[i].inverse()), G[j].compose(G[i].inverse())
            rot.append(_rot_angle(rp.R.T @ rg.R))
            trans.append(_angle_between(rp.trans, rg.trans))
    return np.asarray(rot), np.asarray(trans)


def pose_pair_metrics(pred, gt, tau: int = 5) -> dict:
    """RRA@tau, RTA@tau and AUC@tau (mean accuracy of max(rot, trans) error over
    integer thresholds 1..tau)."""
    rot, trans = relative_pose_errors(pred, gt)
    worst = np.maximum(rot, trans)
    auc = np.mean([(worst < t).mean() for t in range(1, tau + 1)])
    return {f"rra@{tau}": 100.0 * float((rot < tau).mean()),
            f"rta@{tau}": 100.0 * float((trans < tau).mean()),
            f"auc@{tau}": 100.0 * float(auc)}


def _align_poses(P: list, s: float, R: np.ndarray, t: np.ndarray) -> list:
    """Move predicted cameras by the world similarity ``x -> s R x + t``."""
    out = []
    for p in P:
        Rn = p.R @ R.T
        C = s * R @ p.center + t
        out.append(Pose.from_rt(Rn, -Rn @ C))
    return out


def trajectory_metrics(pred, gt) -> dict:
    """ATE (RMSE of sim(3)-aligned centres) and consecutive-frame RPE."""
    P, G = _poses(pred), _poses(gt)
    if len(P) != len(G):
        raise ProtocolError(f"trajectory length mismatch: {len(P)} vs {len(G)}")
    if len(P) < 2:
        raise ProtocolError("trajectory metrics need at least two poses")
    cp = np.stack([p.center for p in P])
    cg = np.stack([g.center for g in G])
    if len(P) == 2:
        # a similarity maps any segment onto any other
        s = np.linalg.norm(cg[1] - cg[0]) / max(np.linalg.norm(cp[1] - cp[0]), 1e-12)
        ate, R, t = 0.0, np.eye(3), cg[0] - s * cp[0]
    else:
        try:
            s, R, t = umeyama_align(cp, cg, strict=False)
        except DegenerateAlignmentError:
            # every predicted centre coincides: the best similarity collapses to the gt mean
            s, R, t = 0.0, np.eye(3), cg.mean(0)
        ate = float(np.sqrt(np.mean(np.sum((apply_sim3(cp, s, R, t) - cg) ** 2, -1))))
    A = _align_poses(P, s, R, t)
    rt, rr = [], []
    for i in range(len(P) - 1):
        dp, dg = A[i + 1].compose(A[i].inverse()), G[i + 1].compose(G[i].inverse())
        E = dg.inverse().compose(dp)
        rt.append(np.linalg.norm(E.trans))
        rr.append(_rot_angle(E.R))
    return {"ate": ate, "rpe_trans": float(np.mean(rt)), "rpe_rot": float(np.mean(rr))}


def _valid_depth(pred, gt, valid):
    ok = np.isfinite(gt) & (gt > 0) & np.isfinite(pred) & (pred > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    return ok


def depth_metrics(pred: np.ndarray, gt: np.ndarray, mode: str = "mono", valid: Optional[np.ndarray] = None) -> dict:
    """AbsRel, delta<1.25 and inlier@1.03, averaged over images.

    ``mode``: ``mono`` rescales each image by its median ratio, ``video`` uses
    one median ratio for the whole stack, ``none`` leaves predictions as is.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ProtocolError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
        valid = None if valid is None else np.asarray(valid)[None]
    ok = _valid_depth(pred, gt, valid)
    if not ok.any():
        raise ProtocolError("no valid depth pixels in common")
    if mode == "video":
        pred = pred * (np.median(gt[ok]) / np.median(pred[ok]))
    elif mode not in ("mono", "none"):
        raise ProtocolError(f"unknown depth protocol {mode!r}")
    rows = []
    for p, g, m in zip(pred, gt, ok):
        if not m.any():
            continue
        p, g = p[m], g[m]
        if mode == "mono":
            p = p * (np.median(g) / np.median(p))
        ratio = np.maximum(p / g, g / p)
        rows.append((np.mean(np.abs(p - g) / g), np.mean(ratio < 1.25), np.mean(ratio < 1.03)))
    r = np.mean(rows, axis=0)
    return {"abs_rel": float(r[0]), "delta_1.25": float(r[1]), "inlier_1.03": float(r[2])}


def point_inlier(pred: np.ndarray, gt: np.ndarray, tau: float = 1.03, valid: Optional[np.ndarray] = None,
                 scale_align: bool = True) -> float:
    """Fraction of points with ``|p_hat - p| < (tau - 1) |p|``, after one median-norm
    scale for the whole set when ``scale_align``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    ok = np.isfinite(pred).all(-1) & np.isfinite(gt).all(-1) & (np.linalg.norm(gt, axis=-1) > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool).reshape(-1)
    if not ok.any():
        raise ProtocolError("no valid points in common")
    p, g = pred[ok], gt[ok]
    ng = np.linalg.norm(g, axis=-1)
    if scale_align:
        npn = np.linalg.norm(p, axis=-1)
        p = p * (np.median(ng) / max(np.median(npn), 1e-12))
    return float(np.mean(np.linalg.norm(p - g, axis=-1) < (tau - 1.0) * ng))


def normal_metrics(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> dict:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    m = np.ones(len(gt), bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if not m.any():
        raise ProtocolError("empty normal mask")
    a = pred[m] / np.maximum(np.linalg.norm(pred[m], axis=-1, keepdims=True), 1e-12)
    b = gt[m] / np.maximum(np.linalg.norm(gt[m], axis=-1, keepdims=True), 1e-12)
    # atan2 stays accurate near zero where arccos of a rounded dot does not
    ang = np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.sum(a * b, -1)))
    return {"normal_mean": float(ang.mean()), "normal_median": float(np.median(ang)),
            "normal_11.25": 100.0 * float((ang < 11.25).mean()),
            "normal_22.5": 100.0 * float((ang < 22.5).mean()),
            "normal_30": 100.0 * float((ang < 30.0).mean())}


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2))
    return PSNR_CAP if mse < 1e-10 else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5) on [0, 1] images, averaged over
    channels; the window-radius border is excluded."""
    a = np.asarray(pred, np.float64)
    b = np.asarray(gt, np.float64)
    if a.shape != b.shape:
        raise ProtocolError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < 2 * SSIM_RADIUS + 1:
        raise ProtocolError("images smaller than the SSIM window")
    trunc = SSIM_RADIUS / SSIM_SIGMA
    f = lambda x: gaussian_filter(x, SSIM_SIGMA, truncate=trunc)  # noqa: E731
    out = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = f(x), f(y)
        vx = f(x * x) - mx * mx
        vy = f(y * y) - my * my
        cxy = f(x * y) - mx * my
        s = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / ((mx ** 2 + my ** 2 + SSIM_C1) * (vx + vy + SSIM_C2))
        r = SSIM_RADIUS
        out.append(s[r:-r, r:-r].mean())
    return float(np.mean(out))


def image_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    return {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt)}


def focal_error(pred: Sequence, gt: Sequence) -> float:
    """Mean over views of ``(|fx_hat - fx| + |fy_hat - fy|) / 2`` in pixels."""
    if len(pred) != len(gt):
        raise ProtocolError(f"{len(pred)} predicted intrinsics vs {len(gt)}")
    return float(np.mean([(abs(p.fx - g.fx) + abs(p.fy - g.fy)) / 2.0 for p, g in zip(pred, gt)]))


# --------------------------------------------------------------------------
# reports

UNITS = {"abs_rel": "ratio", "delta_1.25": "fraction", "inlier_1.03": "fraction", "point_tau_1.03": "fraction",
         "ate": "scene units", "rpe_trans": "scene units", "rpe_rot": "deg", "focal_error": "px",
         "psnr": "dB", "ssim": "ratio", "acc_mean": "scene units", "acc_median": "scene units",
         "comp_mean": "scene units", "comp_median": "scene units"}

DEFAULT_PROTOCOL = {"depth_scaling": "mono", "depth_thresholds": [1.25, 1.03], "point_tau": 1.03,
                    "point_scaling": "median norm", "pose_tau": 5, "auc_thresholds": "integer degrees 1..tau",
                    "ate_alignment": "sim3 umeyama", "chamfer_alignment": "none",
                    "ssim_window": "gaussian 11x11 sigma 1.5", "psnr_cap": PSNR_CAP}


def _unit(name: str) -> str:
    if name in UNITS:
        return UNITS[name]
    if name.startswith(("rra", "rta", "auc")) or name.startswith("normal_") and name[7:8].isdigit():
        return "%"
    if name.startswith("normal_"):
        return "deg"
    return ""


@dataclass
class MetricReport:
    metrics: dict = field(default_factory=dict)
    per_scene: dict = field(default_factory=dict)
    protocol: dict = field(default_factory=lambda: dict(DEFAULT_PROTOCOL))
    undefined: list = field(default_factory=list)

    @classmethod
    def from_scenes(cls, per_scene: dict, protocol: Optional[dict] = None, undefined: Sequence = ()) -> "MetricReport":
        names = sorted({k for m in per_scene.values() for k in m})
        agg = {k: float(np.mean([m[k] for m in per_scene.values() if k in m])) for k in names}
        bad = [k for k, v in agg.items() if not np.isfinite(v)]
        return cls(agg, per_scene, dict(protocol or DEFAULT_PROTOCOL), sorted(set(undefined) | set(bad)))

    @property
    def units(self) -> dict:
        return {k: _unit(k) for k in self.metrics}

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "units": self.units, "per_scene": self.per_scene,
                "protocol": self.protocol, "undefined": self.undefined}

    def write(self, stem: str | os.PathLike) -> tuple[str, str]:
        """``stem.json`` (full report) and ``stem.csv`` (one row per scene plus ``mean``)."""
        stem = str(stem)
        with open(stem + ".json", "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
        names = sorted(self.metrics)
        with open(stem + ".csv", "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["scene"] + names)
            for scene, m in self.per_scene.items():
                wr.writerow([scene] + [m.get(k, "") for k in names])
            wr.writerow(["mean"] + [self.metrics[k] for k in names])
        return stem + ".json", stem + ".csv"

    @classmethod
    def read(cls, path: str | os.PathLike) -> "MetricReport":
        doc = json.loads(open(path).read())
        return cls(doc["metrics"], doc["per_scene"], doc["protocol"], doc["undefined"])


TASKS = ("depth", "points", "pose", "intrinsics", "normal", "nvs")


def evaluate_views(pred: dict, gt: dict, tasks: Sequence[str] = TASKS, protocol: Optional[dict] = None) -> dict:
    """Metrics for one scene.

    ``pred`` and ``gt`` hold any of ``depth`` (N, H, W), ``pointmap`` (N, H, W, 3),
    ``normals`` (N, H, W, 3), ``images`` (N, H, W, 3), ``cameras`` (CameraSet)
    and optionally ``valid`` (N, H, W) in ``gt``. Missing inputs for a requested
    task raise ``ProtocolError``.
    """
    proto = dict(DEFAULT_PROTOCOL, **(protocol or {}))
    unknown = set(tasks) - set(TASKS)
    if unknown:
        raise ProtocolError(f"unknown tasks {sorted(unknown)}")

    def need(d, key, who):
        if key not in d or d[key] is None:
            raise ProtocolError(f"{who} is missing {key!r}")
        return d[key]

    valid = gt.get("valid")
    out = {}
    if "depth" in tasks:
        out.update(depth_metrics(need(pred, "depth", "prediction"), need(gt, "depth", "ground truth"),
                                 proto["depth_scaling"], valid))
    if "points" in tasks:
        out["point_tau_1.03"] = point_inlier(need(pred, "pointmap", "prediction"), need(gt, "pointmap", "ground truth"),
                                             proto["point_tau"], valid)
        out.update(chamfer_acc_comp(pred["pointmap"][valid] if valid is not None else pred["pointmap"],
                                    gt["pointmap"][valid] if valid is not None else gt["pointmap"]))
    if "pose" in tasks:
        pc, gc = need(pred, "cameras", "prediction"), need(gt, "cameras", "ground truth")
        out.update(pose_pair_metrics(pc, gc, proto["pose_tau"]))
        out.update(trajectory_metrics(pc, gc))
    if "intrinsics" in tasks:
        out["focal_error"] = focal_error(need(pred, "cameras", "prediction").intrinsics,
                                         need(gt, "cameras", "ground truth").intrinsics)
    if "normal" in tasks:
        out.update(normal_metrics(need(pred, "normals", "prediction"), need(gt, "normals", "ground truth"), valid))
    if "nvs" in tasks:
        pi, gi = need(pred, "images", "prediction"), need(gt, "images", "ground truth")
        vals = [image_metrics(a, b) for a, b in zip(pi, gi)]
        out["psnr"] = float(np.mean([v["psnr"] for v in vals]))
        out["ssim"] = float(np.mean([v["ssim"] for v in vals]))
    return out
