"""Optional per-view priors (pose, intrinsics, depth) and their token encodings.

An absent prior always encodes to exact zeros, so dropping a prior during
training and never supplying it at inference produce the same forward pass.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .geomcore import (CameraSet, Intrinsics, Pose, normalize_camera_set, pixel_grid, quat_to_matrix,
                       relative_to_first)

POSE, INTRINSICS, DEPTH = 0, 1, 2
MODALITIES = ("pose", "intrinsics", "depth")


class PriorContractError(ValueError):
    pass


class AssemblyError(ValueError):
    pass


@dataclass
class PriorBundle:
    """Per-view optional priors. Each list has one entry per view (``None`` = absent)."""

    poses: Optional[list] = None
    intrinsics: Optional[list] = None
    depths: Optional[list] = None

    def __post_init__(self):
        lengths = {len(x) for x in (self.poses, self.intrinsics, self.depths) if x is not None}
        if len(lengths) > 1:
            raise PriorContractError(f"prior lists disagree on view count: {sorted(lengths)}")

    @property
    def num_views(self) -> Optional[int]:
        for x in (self.poses, self.intrinsics, self.depths):
            if x is not None:
                return len(x)
        return None

    def availability(self, n: int) -> np.ndarray:
        out = np.zeros((n, 3), dtype=bool)
        for k, vals in enumerate((self.poses, self.intrinsics, self.depths)):
            if vals is not None:
                if len(vals) != n:
                    raise PriorContractError(f"{MODALITIES[k]} prior has {len(vals)} views, expected {n}")
                out[:, k] = [v is not None for v in vals]
        return out

    def masked(self, keep: np.ndarray) -> "PriorBundle":
        """Drop every prior whose ``keep[view, modality]`` flag is False."""
        def filt(vals, k):
            if vals is None:
                return None
            kept = [v if keep[i, k] else None for i, v in enumerate(vals)]
            return kept if any(v is not None for v in kept) else None
        return PriorBundle(filt(self.poses, POSE), filt(self.intrinsics, INTRINSICS), filt(self.depths, DEPTH))


def sample_prior_mask(n_views: int, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    """Keep flags of shape (n_views, 3).

    Each modality is toggled once per sample and shared by all views, so the
    pose prior is always a complete camera rig.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"drop probability must lie in [0, 1], got {p_drop}")
    keep = rng.random(3) >= p_drop
    return np.broadcast_to(keep, (n_views, 3)).copy()


# --------------------------------------------------------------------------
# raw prior vectors


def pose_vector(pose: Pose, cams: CameraSet) -> np.ndarray:
    """The 7-vector ``[quat; normalized translation]`` fed to the pose encoder."""
    if cams.normalization is None:
        raise PriorContractError("pose priors must come from a normalized camera set")
    return np.concatenate([pose.quat, pose.trans])


def normalized_pose_priors(poses: list) -> tuple[np.ndarray, np.ndarray]:
    """Canonicalize pose priors to the first view's frame, then normalize the rig.

    Returns ``(vectors (N, 7), present (N,))``. Views without a pose prior get
    a zero row; if view 0 has no pose prior the whole modality is dropped.
    """
    n = len(poses)
    vecs = np.zeros((n, 7))
    present = np.array([p is not None for p in poses])
    if not present.any():
        return vecs, present
    if not present[0]:
        warnings.warn("pose prior missing for the reference view; ignoring pose priors")
        return vecs, np.zeros(n, dtype=bool)
    idx = np.flatnonzero(present)
    sub = [poses[i] for i in idx]
    dummy = [Intrinsics(1.0, 1.0, 0.5, 0.5, 1, 1)] * len(sub)
    rig = normalize_camera_set(relative_to_first(CameraSet(sub, dummy)))
    for row, pose in zip(idx, rig.poses):
        vecs[row] = pose_vector(pose, rig)
    return vecs, present


def intrinsics_vector(intr: Intrinsics) -> np.ndarray:
    return intr.normalized()


def normalize_depth(depth: np.ndarray, valid: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
    """Per-view min-max normalization to [0, 1]; invalid pixels become 0.

    Returns ``None`` when no pixel is valid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(depth) & (depth > 0)
    if not valid.any():
        return None
    lo, hi = depth[valid].min(), depth[valid].max()
    out = np.zeros_like(depth)
    out[valid] = (depth[valid] - lo) / max(hi - lo, 1e-12)
    return out


# --------------------------------------------------------------------------
# encoders


class TwoLayerMLP(nn.Sequential):
    def __init__(self, d_in: int, dim: int):
        super().__init__(nn.Linear(d_in, dim), nn.GELU(), nn.Linear(dim, dim))


def plucker_rays(pose_vec: np.ndarray, intr: Intrinsics, height: int, width: int) -> np.ndarray:
    """(6, H, W) Plücker coordinates ``(d, o x d)`` of every pixel ray in the normalized rig frame."""
    R = quat_to_matrix(pose_vec[:4])
    t = pose_vec[4:]
    u, v = pixel_grid(height, width)
    d = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], -1) @ R
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = -R.T @ t
    m = np.cross(np.broadcast_to(o, d.shape), d)
    return np.concatenate([d, m], -1).transpose(2, 0, 1)


def raymap(intr: Intrinsics, height: int, width: int) -> np.ndarray:
    u, v = pixel_grid(height, width)
    d = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], -1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d.transpose(2, 0, 1)


class PriorEncoder(nn.Module):
    def __init__(self, dim: int, patch_size: int, embedding: str = "single_token"):
        super().__init__()
        self.dim = dim
        self.patch_size = patch_size
        self.embedding = embedding
        self.depth_conv = nn.Conv2d(1, dim, patch_size, stride=patch_size)
        if embedding == "single_token":
            self.pose_mlp = TwoLayerMLP(7, dim)
            self.intr_mlp = TwoLayerMLP(4, dim)
        else:
            self.plucker_conv = nn.Conv2d(6, dim, patch_size, stride=patch_size)
            self.raymap_conv = nn.Conv2d(3, dim, patch_size, stride=patch_size)

    def _patch_tokens(self, conv: nn.Conv2d, x: torch.Tensor) -> torch.Tensor:
        return conv(x).flatten(2).transpose(1, 2)

    def encode_pose(self, vecs: torch.Tensor) -> torch.Tensor:
        return self.pose_mlp(vecs)

    def encode_intrinsics(self, vecs: torch.Tensor) -> torch.Tensor:
        return self.intr_mlp(vecs)

    def encode_depth(self, depth01: torch.Tensor) -> torch.Tensor:
        """(V, H, W) normalized depth -> (V, Hp*Wp, D) tokens."""
        H, W = depth01.shape[-2:]
        if H % self.patch_size or W % self.patch_size:
            raise AssemblyError(f"depth size {H}x{W} not divisible by patch size {self.patch_size}")
        return self._patch_tokens(self.depth_conv, depth01[:, None])

    def forward(self, priors: Optional[PriorBundle], n: int, height: int, width: int,
                like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
        """Encode a bundle into ``(cam (N, D), intr (N, D), additive (N, L, D) | None)``.

        Rows of absent priors are exact zeros; ``additive`` is ``None`` when no
        view carries a dense prior.
        """
        kw = dict(dtype=like.dtype, device=like.device)
        cam = torch.zeros(n, self.dim, **kw)
        intr = torch.zeros(n, self.dim, **kw)
        L = (height // self.patch_size) * (width // self.patch_size)
        add = None
        if priors is None:
            return cam, intr, add
        avail = priors.availability(n)

        def add_rows(rows, tokens):
            nonlocal add
            if add is None:
                add = torch.zeros(n, L, self.dim, **kw)
            add = add.index_put((torch.as_tensor(rows),), add[rows] + tokens)

        pose_vecs, pose_ok = (normalized_pose_priors(priors.poses) if avail[:, POSE].any()
                              else (None, np.zeros(n, dtype=bool)))
        intr_ok = avail[:, INTRINSICS]
        if self.embedding == "single_token":
            if pose_ok.any():
                rows = np.flatnonzero(pose_ok)
                cam = cam.index_put((torch.as_tensor(rows),),
                                    self.encode_pose(torch.as_tensor(pose_vecs[rows], **kw)))
            if intr_ok.any():
                rows = np.flatnonzero(intr_ok)
                vecs = np.stack([intrinsics_vector(priors.intrinsics[i]) for i in rows])
                intr = intr.index_put((torch.as_tensor(rows),), self.encode_intrinsics(torch.as_tensor(vecs, **kw)))
        else:
            if pose_ok.any():
                rows = np.flatnonzero(pose_ok)
                maps = []
                for i in rows:
                    k = priors.intrinsics[i] if intr_ok[i] else Intrinsics.centered(float(max(height, width)), width, height)
                    maps.append(plucker_rays(pose_vecs[i], k, height, width))
                add_rows(rows, self._patch_tokens(self.plucker_conv, torch.as_tensor(np.stack(maps), **kw)))
            if intr_ok.any():
                rows = np.flatnonzero(intr_ok)
                maps = np.stack([raymap(priors.intrinsics[i], height, width) for i in rows])
                add_rows(rows, self._patch_tokens(self.raymap_conv, torch.as_tensor(maps, **kw)))

        if avail[:, DEPTH].any():
            rows, maps = [], []
            for i in np.flatnonzero(avail[:, DEPTH]):
                d01 = normalize_depth(priors.depths[i])
                if d01 is None:
                    continue
                if d01.shape != (height, width):
                    raise AssemblyError(f"depth prior {i} has shape {d01.shape}, expected {(height, width)}")
                rows.append(i)
                maps.append(d01)
            if rows:
                add_rows(np.array(rows), self.encode_depth(torch.as_tensor(np.stack(maps), **kw)))
        return cam, intr, add


# --------------------------------------------------------------------------
# prompt assembly


@dataclass
class TokenGrid:
    cam_token: torch.Tensor      # (N, D)
    intr_token: torch.Tensor     # (N, D)
    patch_tokens: torch.Tensor   # (N, Hp*Wp, D)
    hp: int
    wp: int

    def sequence(self) -> torch.Tensor:
        return torch.cat([self.cam_token[:, None], self.intr_token[:, None], self.patch_tokens], dim=1)

    def __len__(self) -> int:
        return 2 + self.hp * self.wp


def assemble_prompt(img_tokens: torch.Tensor, cam: torch.Tensor, intr: torch.Tensor,
                    additive: Optional[torch.Tensor], hp: int, wp: int) -> TokenGrid:
    """``[cam, intr, img + depth]`` per view."""
    n, L, D = img_tokens.shape
    if L != hp * wp:
        raise AssemblyError(f"{L} image tokens do not form a {hp}x{wp} grid")
    if cam.shape != (n, D) or intr.shape != (n, D):
        raise AssemblyError(f"prior tokens {tuple(cam.shape)}/{tuple(intr.shape)} do not match ({n}, {D})")
    patches = img_tokens
    if additive is not None:
        if additive.shape != img_tokens.shape:
            raise AssemblyError(f"dense prior tokens {tuple(additive.shape)} vs image tokens {tuple(img_tokens.shape)}")
        patches = img_tokens + additive
    return TokenGrid(cam, intr, patches, hp, wp)
