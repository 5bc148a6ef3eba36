"""Gaussian clouds: construction from per-pixel predictions, voxel pruning,
differentiable splatting, and context/target view selection."""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .geomcore import CameraSet, Intrinsics, Pose, pixel_grid, quat_to_matrix_t

CLOUD_MAGIC = b"GSC1"
CLOUD_FIELDS = 17
NEAR_PLANE = 1e-2
MAX_ALPHA = 0.99
WINDOW_SIGMAS = 3.5


class SplitError(ValueError):
    pass


class CloudFormatError(ValueError):
    pass


@dataclass
class GaussianCloud:
    centers: torch.Tensor       # (G, 3)
    opacity: torch.Tensor       # (G,)
    rotation: torch.Tensor      # (G, 4) unit quaternions
    scale: torch.Tensor         # (G, 3)
    color: torch.Tensor         # (G, 3)
    source_view: torch.Tensor   # (G,) long

    def __len__(self) -> int:
        return self.centers.shape[0]

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(self.centers[idx], self.opacity[idx], self.rotation[idx],
                             self.scale[idx], self.color[idx], self.source_view[idx])

    def detach(self) -> "GaussianCloud":
        return GaussianCloud(*(t.detach() for t in (self.centers, self.opacity, self.rotation,
                                                    self.scale, self.color)), self.source_view)

    @classmethod
    def empty(cls, dtype=torch.float32) -> "GaussianCloud":
        z = lambda *s: torch.zeros(*s, dtype=dtype)  # noqa: E731
        return cls(z(0, 3), z(0), z(0, 4), z(0, 3), z(0, 3), torch.zeros(0, dtype=torch.long))


@dataclass
class TorchCamera:
    R: torch.Tensor   # (3, 3) world-to-camera
    t: torch.Tensor   # (3,)
    fx: float | torch.Tensor
    fy: float | torch.Tensor
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def from_geom(cls, pose: Pose, intr: Intrinsics, dtype=torch.float32) -> "TorchCamera":
        return cls(torch.as_tensor(pose.R, dtype=dtype), torch.as_tensor(pose.trans, dtype=dtype),
                   float(intr.fx), float(intr.fy), float(intr.cx), float(intr.cy), intr.width, intr.height)

    @classmethod
    def from_vector(cls, vec: torch.Tensor, width: int, height: int) -> "TorchCamera":
        """A predicted 9-vector ``[quat, trans, fx/W, fy/H]``; stays differentiable."""
        return cls(quat_to_matrix_t(vec[:4]), vec[4:7], vec[7] * width, vec[8] * height,
                   width / 2.0, height / 2.0, width, height)


def camera_list(cams: CameraSet, dtype=torch.float32) -> list:
    return [TorchCamera.from_geom(p, k, dtype) for p, k in zip(cams.poses, cams.intrinsics)]


# --------------------------------------------------------------------------
# construction and pruning


def backproject_t(depth: torch.Tensor, cam: TorchCamera) -> torch.Tensor:
    """(H, W) depth -> (H, W, 3) world points, differentiable in depth and camera."""
    H, W = depth.shape
    u, v = pixel_grid(H, W)
    u = torch.as_tensor(u, dtype=depth.dtype)
    v = torch.as_tensor(v, dtype=depth.dtype)
    pc = torch.stack([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth], -1)
    return (pc - cam.t) @ cam.R


def build_cloud(gs_depth: torch.Tensor, attrs: dict, cams: Sequence[TorchCamera],
                views: Optional[Sequence[int]] = None, valid: Optional[torch.Tensor] = None) -> GaussianCloud:
    """One Gaussian per valid pixel of each listed view, centred on its back-projected depth."""
    views = list(range(gs_depth.shape[0])) if views is None else list(views)
    parts = []
    for i in views:
        pts = backproject_t(gs_depth[i], cams[i]).reshape(-1, 3)
        ok = torch.isfinite(gs_depth[i]) & (gs_depth[i] > 0)
        if valid is not None:
            ok &= valid[i].bool()
        ok = ok.reshape(-1)
        parts.append(GaussianCloud(
            pts[ok],
            attrs["opacity"][i].reshape(-1)[ok],
            attrs["rotation"][i].reshape(-1, 4)[ok],
            attrs["scale"][i].reshape(-1, 3)[ok],
            attrs["color"][i].reshape(-1, 3)[ok],
            torch.full((int(ok.sum()),), i, dtype=torch.long),
        ))
    return concat_clouds(parts)


def concat_clouds(parts: list) -> GaussianCloud:
    if not parts:
        return GaussianCloud.empty()
    return GaussianCloud(*(torch.cat([getattr(p, f) for p in parts]) for f in
                           ("centers", "opacity", "rotation", "scale", "color", "source_view")))


def voxel_indices(centers: torch.Tensor, voxel: float) -> torch.Tensor:
    return torch.floor(centers.detach() / voxel).long()


def voxel_prune(cloud: GaussianCloud, voxel: float) -> GaussianCloud:
    """Merge Gaussians sharing a voxel.

    Per occupied voxel: opacity-weighted mean of centre, scale and colour;
    rotation and source view of the most opaque member; opacity = max member
    opacity. Output is ordered by voxel index.
    """
    if voxel <= 0:
        raise ValueError("voxel edge must be positive")
    G = len(cloud)
    if G == 0:
        return cloud
    keys, inv = torch.unique(voxel_indices(cloud.centers, voxel), dim=0, return_inverse=True)
    M = keys.shape[0]
    w = cloud.opacity
    wsum = torch.zeros(M, dtype=w.dtype).index_add(0, inv, w)

    def wmean(x):
        acc = torch.zeros(M, x.shape[1], dtype=x.dtype).index_add(0, inv, w[:, None] * x)
        return acc / wsum[:, None]

    opacity = torch.zeros(M, dtype=w.dtype).scatter_reduce(0, inv, w, reduce="amax", include_self=False)
    is_max = w.detach() == opacity.detach()[inv]
    cand = torch.where(is_max, torch.arange(G), torch.full((G,), G))
    rep = torch.full((M,), G, dtype=torch.long).scatter_reduce(0, inv, cand, reduce="amin", include_self=True)
    return GaussianCloud(wmean(cloud.centers), opacity, cloud.rotation[rep], wmean(cloud.scale),
                         wmean(cloud.color), cloud.source_view[rep])


# --------------------------------------------------------------------------
# rendering


def project_gaussians(cloud: GaussianCloud, cam: TorchCamera, dilation: float):
    """Camera-space depth, 2D means and inverse 2D covariances (local affine projection)."""
    pc = cloud.centers @ cam.R.T + cam.t
    x, y, z = pc.unbind(-1)
    Rg = quat_to_matrix_t(cloud.rotation)
    M = Rg * cloud.scale[:, None, :]                       # R_g S
    cov3 = M @ M.transpose(1, 2)
    covc = cam.R @ cov3 @ cam.R.T
    zero = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([cam.fx / z, zero, -cam.fx * x / z ** 2], -1),
        torch.stack([zero, cam.fy / z, -cam.fy * y / z ** 2], -1),
    ], 1)
    cov2 = J @ covc @ J.transpose(1, 2)
    a = cov2[:, 0, 0] + dilation
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + dilation
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], -1)
    mean2d = torch.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], -1)
    return z, mean2d, conic, torch.stack([a, b, c], -1)


def depth_order(z: torch.Tensor, mean2d: torch.Tensor) -> torch.Tensor:
    """Canonical front-to-back order: depth, then image position (ties only)."""
    zn = z.detach().cpu().numpy()
    mn = mean2d.detach().cpu().numpy()
    return torch.as_tensor(np.lexsort((mn[:, 1], mn[:, 0], zn)), dtype=torch.long)


def _composite(alpha: torch.Tensor, color: torch.Tensor, depth: torch.Tensor, bg: torch.Tensor):
    """Front-to-back compositing of per-pixel lists. ``alpha`` (P, K) is depth-sorted."""
    trans = torch.cumprod(1.0 - alpha, dim=1)
    trans = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], 1)
    w = alpha * trans
    acc = w.sum(1)
    rgb = (w[..., None] * color).sum(1) + (1.0 - acc)[:, None] * bg
    zsum = (w * depth).sum(1)
    d = torch.where(acc > 1e-6, zsum / acc.clamp_min(1e-6), torch.zeros_like(zsum))
    return rgb, d, acc


def render(cloud: GaussianCloud, cam: TorchCamera, bg=(0.0, 0.0, 0.0), dilation: float = 0.1,
           mode: str = "auto") -> dict:
    """Splat ``cloud`` into ``cam``: ``{"image" (H, W, 3), "depth" (H, W), "alpha" (H, W)}``.

    ``mode="dense"`` evaluates every Gaussian at every pixel; ``"windowed"``
    restricts each Gaussian to a square of ``WINDOW_SIGMAS`` standard
    deviations around its mean; ``"auto"`` picks whichever is cheaper.
    """
    H, W = cam.height, cam.width
    dtype = cloud.centers.dtype
    bg = torch.as_tensor(bg, dtype=dtype)
    if len(cloud):
        z = cloud.centers.detach() @ cam.R.detach().T[:, 2] + cam.t.detach()[2]
        cloud = cloud.subset(z > NEAR_PLANE)
    if len(cloud) == 0:
        return {"image": bg.expand(H, W, 3).clone(), "depth": torch.zeros(H, W, dtype=dtype),
                "alpha": torch.zeros(H, W, dtype=dtype)}

    z, mean2d, conic, cov2 = project_gaussians(cloud, cam, dilation)
    order = depth_order(z, mean2d)
    z, mean2d, conic, cov2 = z[order], mean2d[order], conic[order], cov2[order]
    opacity, color = cloud.opacity[order], cloud.color[order]
    G = len(order)

    radii = _radii(cov2, H, W)
    use_dense = mode == "dense" or (mode == "auto" and int(((2 * radii + 1) ** 2).sum()) * 4 >= G * H * W)
    if use_dense:
        u, v = pixel_grid(H, W)
        pix = torch.as_tensor(np.stack([u.ravel(), v.ravel()], -1), dtype=dtype)     # (P, 2)
        d = pix[:, None, :] - mean2d[None]                                           # (P, G, 2)
        alpha = _alpha(d, conic[None], opacity[None])
        rgb, depth, acc = _composite(alpha, color[None].expand(H * W, G, 3), z[None].expand(H * W, G), bg)
    else:
        rgb, depth, acc = _render_windowed(mean2d, conic, opacity, color, z, radii, H, W, bg)
    return {"image": rgb.reshape(H, W, 3), "depth": depth.reshape(H, W), "alpha": acc.reshape(H, W)}


def _alpha(d, conic, opacity):
    power = -0.5 * (conic[..., 0] * d[..., 0] ** 2 + 2 * conic[..., 1] * d[..., 0] * d[..., 1]
                    + conic[..., 2] * d[..., 1] ** 2)
    return torch.clamp(opacity * torch.exp(power), max=MAX_ALPHA)


def _radii(cov2: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Per-Gaussian window half-width in pixels from the largest 2D eigenvalue."""
    a, b, c = cov2.detach().unbind(-1)
    lam = 0.5 * (a + c) + torch.sqrt((0.25 * (a - c) ** 2 + b * b).clamp_min(0))
    r = torch.ceil(WINDOW_SIGMAS * torch.sqrt(lam))
    return r.clamp(max=max(H, W)).long()


def _render_windowed(mean2d, conic, opacity, color, z, radii, H, W, bg):
    G = mean2d.shape[0]
    side = 2 * radii + 1
    counts = side * side
    g_idx = torch.repeat_interleave(torch.arange(G), counts)
    local = torch.arange(g_idx.numel()) - torch.repeat_interleave(torch.cumsum(counts, 0) - counts, counts)
    base = torch.floor(mean2d.detach()).long()                         # pixel containing the mean
    cols = base[g_idx, 0] + local % side[g_idx] - radii[g_idx]
    rows = base[g_idx, 1] + local // side[g_idx] - radii[g_idx]
    inside = (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)
    g_idx = g_idx[inside]                                              # already depth-ranked
    pix = (rows * W + cols)[inside]
    if pix.numel() == 0:
        P = H * W
        return bg.expand(P, 3).clone(), torch.zeros(P, dtype=z.dtype), torch.zeros(P, dtype=z.dtype)
    # group entries by pixel, front-to-back within a pixel
    key = pix * G + g_idx
    srt = torch.argsort(key)
    g_idx, pix = g_idx[srt], pix[srt]
    counts = torch.bincount(pix, minlength=H * W)
    starts = torch.cumsum(counts, 0) - counts
    slot = torch.arange(pix.numel()) - starts[pix]
    K = int(counts.max())
    centers = torch.stack([(pix % W).to(z.dtype) + 0.5, (pix // W).to(z.dtype) + 0.5], -1)
    a = _alpha(centers - mean2d[g_idx], conic[g_idx], opacity[g_idx])
    P = H * W
    alpha = z.new_zeros(P, K).index_put((pix, slot), a)
    col = z.new_zeros(P, K, 3).index_put((pix, slot), color[g_idx])
    dep = z.new_zeros(P, K).index_put((pix, slot), z[g_idx])
    return _composite(alpha, col, dep, bg)


# --------------------------------------------------------------------------
# view selection


@dataclass
class ViewSplit:
    context_ids: list
    target_ids: list
    overlap_score: float


def novel_view_mask(target_depth: Optional[np.ndarray], target_pose: Pose, target_intr: Intrinsics,
                    context: Sequence[tuple], tol: float = 0.03) -> np.ndarray:
    """Target pixels whose back-projected point lands in some context view with
    agreeing depth. ``context`` holds ``(depth, pose, intrinsics)`` triples."""
    if target_depth is None:
        warnings.warn("no ground-truth depth for the target view; visibility mask set to all-true")
        return np.ones((target_intr.height, target_intr.width), dtype=bool)
    from .geomcore import backproject, project
    pm = backproject(target_depth, target_intr, target_pose)
    visible = np.zeros(target_depth.shape, dtype=bool)
    pts = np.where(pm.validity[..., None], pm.points, 0.0)
    for depth, pose, intr in context:
        u, v, zc = project(pts, intr, pose)
        ok = pm.validity & np.isfinite(u) & np.isfinite(v) & (zc > 0)
        j = np.floor(np.where(ok, u, -1)).astype(np.int64)
        i = np.floor(np.where(ok, v, -1)).astype(np.int64)
        ok &= (j >= 0) & (j < intr.width) & (i >= 0) & (i < intr.height)
        dc = np.zeros_like(zc)
        dc[ok] = depth[i[ok], j[ok]]
        ok &= np.isfinite(dc) & (dc > 0)
        ok &= np.abs(zc - dc) <= tol * np.where(ok, dc, 1.0)
        visible |= ok
    return visible


def _overlap(depths, cams: CameraSet, ctx, tgt, tol) -> float:
    context = [(depths[c], cams.poses[c], cams.intrinsics[c]) for c in ctx]
    scores = []
    for t in tgt:
        m = novel_view_mask(depths[t], cams.poses[t], cams.intrinsics[t], context, tol)
        valid = np.isfinite(depths[t]) & (depths[t] > 0)
        scores.append(m[valid].mean() if valid.any() else 0.0)
    return float(np.mean(scores))


def candidate_splits(n_views: int, k: int, rng: np.random.Generator, n_context: Optional[int] = None) -> list:
    """``k`` random (context, target) partitions; context size defaults to a draw in [ceil(N/2), N-1]."""
    if n_views < 2:
        raise SplitError("need at least two views to split into context and target")
    if k < 1:
        raise SplitError("need at least one candidate split")
    out = []
    for _ in range(k):
        size = n_context if n_context is not None else int(rng.integers((n_views + 1) // 2, n_views))
        if not 1 <= size < n_views:
            raise SplitError(f"context size {size} invalid for {n_views} views")
        ctx = sorted(int(i) for i in rng.choice(n_views, size=size, replace=False))
        out.append((ctx, [i for i in range(n_views) if i not in ctx]))
    return out


def select_split(depths: Sequence[np.ndarray], cams: CameraSet, k: int, rng: np.random.Generator,
                 n_context: Optional[int] = None, tol: float = 0.03) -> ViewSplit:
    """Best of ``k`` random context/target partitions by mean target overlap.

    Ties go to the earliest candidate.
    """
    best = None
    for ctx, tgt in candidate_splits(len(cams), k, rng, n_context):
        score = _overlap(depths, cams, ctx, tgt, tol)
        if best is None or score > best.overlap_score:
            best = ViewSplit(ctx, tgt, score)
    return best


# --------------------------------------------------------------------------
# export


def save_cloud(path: str | os.PathLike, cloud: GaussianCloud, voxel_size: float, config: Optional[dict] = None) -> None:
    """Binary table (``GSC1`` + uint32 count, then 17 float32 per Gaussian) plus a JSON sidecar."""
    c = cloud.detach()
    G = len(c)
    rows = np.zeros((G, CLOUD_FIELDS), dtype="<f4")
    rows[:, 0:3] = c.centers.cpu().numpy()
    rows[:, 3:7] = c.rotation.cpu().numpy()
    rows[:, 7:10] = c.scale.cpu().numpy()
    rows[:, 10] = c.opacity.cpu().numpy()
    rows[:, 11:14] = c.color.cpu().numpy()
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC + struct.pack("<I", G) + rows.tobytes())
    sidecar = {"count": G, "voxel_size": voxel_size, "config": config or {}}
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)


def load_cloud(path: str | os.PathLike) -> GaussianCloud:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 8 or buf[:4] != CLOUD_MAGIC:
        raise CloudFormatError(f"{path}: not a Gaussian cloud file")
    (G,) = struct.unpack_from("<I", buf, 4)
    if len(buf) != 8 + G * CLOUD_FIELDS * 4:
        raise CloudFormatError(f"{path}: header declares {G} Gaussians but payload has {len(buf) - 8} bytes")
    rows = torch.as_tensor(np.frombuffer(buf, dtype="<f4", offset=8).reshape(G, CLOUD_FIELDS).copy())
    return GaussianCloud(rows[:, 0:3], rows[:, 10], rows[:, 3:7], rows[:, 7:10], rows[:, 11:14],
                         torch.full((G,), -1, dtype=torch.long))
