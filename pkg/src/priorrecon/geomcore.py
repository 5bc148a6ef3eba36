"""Camera, rotation and projective geometry shared by every other module.

Conventions used throughout the package:

* poses are world-to-camera, ``x_cam = R @ x_world + t``;
* cameras look down +z with x to the right and y down (OpenCV);
* quaternions are stored ``(w, x, y, z)`` with ``w >= 0``;
* pixel ``(row i, col j)`` has its centre at ``(u, v) = (j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

DEGENERATE_SCALE_EPS = 1e-8


class InvalidRotationError(ValueError):
    pass


class DegenerateAlignmentError(ValueError):
    pass


class CameraSchemaError(ValueError):
    """Malformed camera JSON; the message names the offending field."""


@dataclass
class Pose:
    quat: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.quat = canonical_quat(np.asarray(self.quat, dtype=np.float64))
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(quat_from_matrix(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.trans

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.trans
        return T

    def inverse(self) -> "Pose":
        R = self.R
        return Pose.from_rt(R.T, -R.T @ self.trans)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        R = self.R @ other.R
        return Pose.from_rt(R, self.R @ other.trans + self.trans)


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    @classmethod
    def centered(cls, focal: float, width: int, height: int) -> "Intrinsics":
        return cls(focal, focal, width / 2.0, height / 2.0, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalized(self) -> np.ndarray:
        return np.array([self.fx / self.width, self.fy / self.height,
                         self.cx / self.width, self.cy / self.height])

    def scaled(self, factor: float) -> "Intrinsics":
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                          int(round(self.width * factor)), int(round(self.height * factor)))


@dataclass
class Normalization:
    centroid: np.ndarray
    scale: float


@dataclass
class CameraSet:
    poses: list
    intrinsics: list
    normalization: Optional[Normalization] = None

    def __post_init__(self):
        if len(self.poses) != len(self.intrinsics) or len(self.poses) == 0:
            raise ValueError("poses and intrinsics must have equal, nonzero length")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def centers(self) -> np.ndarray:
        return np.stack([p.center for p in self.poses])


@dataclass
class PointMap:
    points: np.ndarray
    validity: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.validity is None:
            self.validity = np.all(np.isfinite(self.points), axis=-1)


# --------------------------------------------------------------------------
# rotations


def canonical_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n == 0:
        raise InvalidRotationError("zero quaternion")
    q = q / n
    if q[0] < 0:
        q = -q
    elif q[0] == 0:
        # w == 0: fix the sign on the first nonzero vector component
        nz = np.flatnonzero(q[1:])
        if nz.size and q[1 + nz[0]] < 0:
            q = -q
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def check_rotation(R: np.ndarray, tol: float = 1e-6) -> None:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidRotationError(f"expected a finite 3x3 matrix, got shape {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidRotationError("matrix is not a proper rotation")


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; picks the numerically largest pivot."""
    R = np.asarray(R, dtype=np.float64)
    check_rotation(R)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonical_quat(np.array(q))


def rotation_angle_deg(R: np.ndarray) -> float:
    # atan2 of (sin, cos) is well conditioned at 0 and 180 degrees, unlike arccos of the trace
    R = np.asarray(R, dtype=np.float64)
    sin = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    cos = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arctan2(sin, cos)))


def axis_angle_matrix(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1 - np.cos(angle_rad)) * K @ K


# --------------------------------------------------------------------------
# camera sets


def normalize_camera_set(cams: CameraSet) -> CameraSet:
    """Shift camera centres to their centroid and scale the farthest to unit distance.

    Rotations are untouched; translations are recomputed from the new centres.
    """
    centers = cams.centers
    c = centers.mean(axis=0)
    alpha = float(np.linalg.norm(centers - c, axis=1).max())
    alpha = max(alpha, DEGENERATE_SCALE_EPS)
    poses = []
    for pose, center in zip(cams.poses, centers):
        R = pose.R
        poses.append(Pose(pose.quat, -R @ ((center - c) / alpha)))
    return CameraSet(poses, list(cams.intrinsics), Normalization(c, alpha))


def denormalize_camera_set(cams: CameraSet) -> CameraSet:
    if cams.normalization is None:
        return cams
    c, alpha = cams.normalization.centroid, cams.normalization.scale
    poses = []
    for pose, center in zip(cams.poses, cams.centers):
        poses.append(Pose(pose.quat, -pose.R @ (center * alpha + c)))
    return CameraSet(poses, list(cams.intrinsics), None)


def relative_to_first(cams: CameraSet) -> CameraSet:
    """Re-express every pose in the frame of camera 0 (which becomes the identity)."""
    inv0 = cams.poses[0].inverse()
    poses = [Pose.identity()] + [p.compose(inv0) for p in cams.poses[1:]]
    return CameraSet(poses, list(cams.intrinsics), None)


# --------------------------------------------------------------------------
# projection


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates ``(u, v)``, each of shape (H, W)."""
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return u, v


def camera_points(depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    u, v = pixel_grid(*depth.shape)
    x = (u - intr.cx) / intr.fx * depth
    y = (v - intr.cy) / intr.fy * depth
    return np.stack([x, y, depth], axis=-1)


def backproject(depth: np.ndarray, intr: Intrinsics, pose: Pose) -> PointMap:
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    pc = camera_points(np.where(valid, depth, 1.0), intr)
    R = pose.R
    pw = (pc - pose.trans) @ R  # R^T (pc - t), row-vector form
    pw[~valid] = np.nan
    return PointMap(pw, valid)


def project(points: np.ndarray, intr: Intrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World points (..., 3) -> pixel ``u``, ``v`` and camera depth ``z``."""
    pc = np.asarray(points, dtype=np.float64) @ pose.R.T + pose.trans
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[..., 0] / z + intr.cx
        v = intr.fy * pc[..., 1] / z + intr.cy
    return u, v, z


def orient_toward_camera(normals: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Flip camera-frame normals (H, W, 3) so that ``n . view_dir <= 0`` at every pixel."""
    rays = camera_points(np.ones((intr.height, intr.width)), intr)
    facing = np.einsum("hwc,hwc->hw", normals, rays)
    return np.where((facing > 0)[..., None], -normals, normals)


def pseudo_normals_from_depth(depth: np.ndarray, intr: Intrinsics, k: int = 5,
                              valid: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame normals from a least-squares plane fit over k x k windows.

    Returns ``(normals, ok)`` where ``normals`` is (H, W, 3), unit length and
    facing the camera wherever ``ok`` is set, and NaN elsewhere.
    """
    if k % 2 != 1:
        raise ValueError("window size must be odd")
    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(depth) & (depth > 0)
    pts = camera_points(np.where(valid, depth, 0.0), intr)
    r = k // 2
    pad_pts = np.pad(pts, ((r, r), (r, r), (0, 0)))
    pad_ok = np.pad(valid, r).astype(np.float64)
    win = np.lib.stride_tricks.sliding_window_view(pad_pts, (k, k), axis=(0, 1))  # H,W,3,k,k
    win = win.reshape(*depth.shape, 3, k * k).transpose(0, 1, 3, 2)
    w = np.lib.stride_tricks.sliding_window_view(pad_ok, (k, k)).reshape(*depth.shape, k * k)
    count = w.sum(-1)
    mean = np.einsum("hwk,hwkc->hwc", w, win) / np.maximum(count, 1)[..., None]
    d = (win - mean[:, :, None, :]) * w[..., None]
    cov = np.einsum("hwka,hwkb->hwab", d, d)
    _, vecs = np.linalg.eigh(cov)
    n = orient_toward_camera(vecs[..., :, 0], intr)
    ok = valid & (count >= 3)
    # a rank-deficient window (collinear samples) has no well-defined plane
    evals = np.linalg.eigvalsh(cov)
    ok &= evals[..., 1] > 1e-12 * np.maximum(evals[..., 2], 1e-300)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    n[~ok] = np.nan
    return n, ok


def umeyama_align(src: np.ndarray, dst: np.ndarray, with_scale: bool = True,
                  strict: bool = True) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares similarity ``dst ≈ s R src + t`` (Umeyama 1991).

    ``strict`` rejects collinear sources, where the rotation about the line is
    not unique; with ``strict=False`` one minimiser is returned.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape or len(src) < 3:
        raise DegenerateAlignmentError("need at least 3 matched correspondences")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] <= 1e-12:
        raise DegenerateAlignmentError("source points are coincident")
    if strict and sv[1] <= 1e-9 * sv[0]:
        raise DegenerateAlignmentError("source points are collinear")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs ** 2).sum() / len(src)
        s = float(np.trace(np.diag(D) @ S) / var_s)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def apply_sim3(points: np.ndarray, s: float, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    return s * np.asarray(points) @ R.T + t


# --------------------------------------------------------------------------
# camera JSON


def cameras_to_dict(cams: CameraSet) -> dict:
    views = []
    for pose, intr in zip(cams.poses, cams.intrinsics):
        views.append({
            "fx": float(intr.fx), "fy": float(intr.fy), "cx": float(intr.cx), "cy": float(intr.cy),
            "width": int(intr.width), "height": int(intr.height),
            "quat": [float(v) for v in pose.quat], "trans": [float(v) for v in pose.trans],
        })
    return {"views": views}


def _field(view: dict, key: str, where: str, length: Optional[int] = None):
    if key not in view:
        raise CameraSchemaError(f"{where}.{key}: missing")
    val = view[key]
    if length is None:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise CameraSchemaError(f"{where}.{key}: expected a number, got {val!r}")
        return val
    if not isinstance(val, list) or len(val) != length or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in val):
        raise CameraSchemaError(f"{where}.{key}: expected a list of {length} numbers")
    return val


def cameras_from_dict(doc: dict) -> CameraSet:
    if not isinstance(doc, dict) or not isinstance(doc.get("views"), list) or not doc["views"]:
        raise CameraSchemaError("views: expected a nonempty list")
    poses, intrs = [], []
    for i, view in enumerate(doc["views"]):
        where = f"views[{i}]"
        if not isinstance(view, dict):
            raise CameraSchemaError(f"{where}: expected an object")
        vals = {k: _field(view, k, where) for k in ("fx", "fy", "cx", "cy", "width", "height")}
        quat = _field(view, "quat", where, 4)
        trans = _field(view, "trans", where, 3)
        try:
            intrs.append(Intrinsics(vals["fx"], vals["fy"], vals["cx"], vals["cy"],
                                    int(vals["width"]), int(vals["height"])))
            poses.append(Pose(np.array(quat, dtype=np.float64), np.array(trans, dtype=np.float64)))
        except ValueError as exc:
            raise CameraSchemaError(f"{where}: {exc}") from exc
    return CameraSet(poses, intrs)


def save_cameras(path: str | os.PathLike, cams: CameraSet) -> None:
    with open(path, "w") as f:
        json.dump(cameras_to_dict(cams), f, indent=1)


def load_cameras(path: str | os.PathLike) -> CameraSet:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise CameraSchemaError(f"{os.fspath(path)}: not valid JSON ({exc})") from exc
    return cameras_from_dict(doc)


# --------------------------------------------------------------------------
# differentiable (torch) counterparts used by the network and the renderer


def quat_to_matrix_t(q):
    """(..., 4) quaternions (w, x, y, z), not necessarily unit -> (..., 3, 3)."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, -1).reshape(*q.shape[:-1], 3, 3)


def quat_multiply_t(a, b):
    """Hamilton product ``a ⊗ b`` (rotation ``b`` first)."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], -1)


def quat_conjugate_t(q):
    return q * torch.tensor([1.0, -1.0, -1.0, -1.0], dtype=q.dtype, device=q.device)
