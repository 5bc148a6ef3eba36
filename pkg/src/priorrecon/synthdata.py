"""Deterministic raycast scenes with exact depth, normals, point maps and cameras.

A scene is a textured room with a few boxes and spheres on the floor, seen by
cameras on a jittered orbit around the objects. Everything is returned in the
frame of camera 0 with translations scaled so the camera centres lie in the
unit ball around their centroid ("canonical units").
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .config import ConfigError, ResolutionPolicy
from .geomcore import (CameraSet, Intrinsics, Pose, backproject, load_cameras, normalize_camera_set,
                       relative_to_first, save_cameras)
from .gridio import read_grid, write_grid

FORMAT_VERSION = 1
ROOM_HALF = 3.5
ROOM_HEIGHT = 3.0


class SceneGenerationError(RuntimeError):
    pass


class SceneFormatError(ValueError):
    pass


@dataclass
class SceneSpec:
    min_objects: int = 1
    max_objects: int = 4
    sphere_prob: float = 0.5
    fov_deg: tuple = (50.0, 70.0)
    orbit_step_deg: tuple = (12.0, 20.0)
    radius: tuple = (2.0, 2.6)
    height: tuple = (0.9, 1.5)
    supersample: int = 2
    max_retries: int = 20


@dataclass
class SceneSample:
    images: np.ndarray      # (N, H, W, 3) in [0, 1]
    depths: np.ndarray      # (N, H, W)
    normals: np.ndarray     # (N, H, W, 3) camera frame, facing the camera
    pointmaps: np.ndarray   # (N, H, W, 3) camera-0 frame
    cams: CameraSet
    valid: np.ndarray       # (N, H, W) bool
    labels: np.ndarray      # (N, H, W) primitive index
    seed: int
    spec: SceneSpec = field(default_factory=SceneSpec)
    scale: float = 1.0      # world units per canonical unit

    @property
    def num_views(self) -> int:
        return self.images.shape[0]


# --------------------------------------------------------------------------
# primitives


@dataclass
class _Material:
    a: np.ndarray
    b: np.ndarray
    kind: str          # "checker" | "waves"
    period: float
    direction: np.ndarray
    phase: np.ndarray

    def albedo(self, p: np.ndarray) -> np.ndarray:
        if self.kind == "checker":
            parity = np.floor((p + self.phase) / self.period).astype(np.int64).sum(-1) % 2
            mix = parity[..., None].astype(np.float64)
        else:
            mix = (0.5 + 0.5 * np.sin(2 * np.pi * (p @ self.direction) / self.period))[..., None]
        return self.a * (1 - mix) + self.b * mix


@dataclass
class _Box:
    center: np.ndarray
    half: np.ndarray
    R: np.ndarray       # local-to-world rotation
    material: _Material

    def intersect(self, o, d):
        ol = (o - self.center) @ self.R
        dl = d @ self.R
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-self.half - ol) / dl
            t2 = (self.half - ol) / dl
        lo, hi = np.fmin(t1, t2), np.fmax(t1, t2)
        tmin, tmax = lo.max(-1), hi.min(-1)
        hit = (tmax >= tmin) & (tmin > 1e-9)
        axis = lo.argmax(-1)
        nl = np.zeros_like(dl)
        nl[np.arange(len(d)), axis] = -np.sign(dl[np.arange(len(d)), axis])
        return np.where(hit, tmin, np.inf), nl @ self.R.T

    def contains(self, p, margin=0.0):
        return bool(np.all(np.abs((p - self.center) @ self.R) <= self.half + margin))


@dataclass
class _Sphere:
    center: np.ndarray
    radius: float
    material: _Material

    def intersect(self, o, d):
        oc = o - self.center
        a = (d * d).sum(-1)
        b = (d * oc).sum(-1)
        c = (oc * oc).sum(-1) - self.radius ** 2
        disc = b * b - a * c
        with np.errstate(invalid="ignore"):
            t = (-b - np.sqrt(disc)) / a
        hit = (disc >= 0) & (t > 1e-9)
        t = np.where(hit, t, np.inf)
        p = o + np.where(hit, t, 0.0)[:, None] * d
        return t, (p - self.center) / self.radius

    def contains(self, p, margin=0.0):
        return float(np.linalg.norm(p - self.center)) <= self.radius + margin


def _room_intersect(o, d):
    lo = np.array([-ROOM_HALF, -ROOM_HALF, 0.0])
    hi = np.array([ROOM_HALF, ROOM_HALF, ROOM_HEIGHT])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(d > 0, (hi - o) / d, np.where(d < 0, (lo - o) / d, np.inf))
    axis = t.argmin(-1)
    idx = np.arange(len(d))
    n = np.zeros_like(d)
    n[idx, axis] = -np.sign(d[idx, axis])
    face = axis * 2 + (d[idx, axis] > 0)
    return t[idx, axis], n, face


def _random_material(rng, kind=None) -> _Material:
    a = rng.uniform(0.1, 0.9, 3)
    b = np.clip(a + rng.choice([-1, 1], 3) * rng.uniform(0.25, 0.5, 3), 0.05, 0.95)
    kind = kind or ("checker" if rng.random() < 0.5 else "waves")
    direction = rng.normal(size=3)
    period = float(rng.uniform(0.2, 0.45))
    return _Material(a, b, kind, period, direction / np.linalg.norm(direction), rng.uniform(0.1, 0.9, 3) * period)


@dataclass
class _World:
    room: list          # six face materials: -x, +x, -y, +y, floor, ceiling
    objects: list
    lights: np.ndarray

    def cast(self, o, d):
        """Nearest hit per ray: (t, world normal facing the ray, label, albedo)."""
        t, n, face = _room_intersect(o, d)
        label = face.astype(np.int64)
        for k, obj in enumerate(self.objects):
            tk, nk = obj.intersect(o, d)
            closer = tk < t
            t = np.where(closer, tk, t)
            n = np.where(closer[:, None], nk, n)
            label = np.where(closer, 6 + k, label)
        p = o + t[:, None] * d
        albedo = np.zeros_like(p)
        mats = self.room + [obj.material for obj in self.objects]
        for k, mat in enumerate(mats):
            sel = label == k
            if sel.any():
                albedo[sel] = mat.albedo(p[sel])
        return t, n, label, albedo, p

    def shade(self, p, n, albedo):
        light = np.full(len(p), 0.35)
        for lp in self.lights:
            v = lp - p
            v /= np.linalg.norm(v, axis=-1, keepdims=True)
            light += 0.45 * np.clip((n * v).sum(-1), 0, None)
        return np.clip(albedo * light[:, None], 0.0, 1.0)


def _make_world(rng, spec: SceneSpec) -> _World:
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects, placed = [], []
    for _ in range(n_obj):
        for _ in range(50):
            xy = rng.uniform(-0.9, 0.9, 2)
            if rng.random() < spec.sphere_prob:
                r = float(rng.uniform(0.2, 0.45))
                cand = _Sphere(np.array([xy[0], xy[1], r + rng.uniform(0, 0.2)]), r, _random_material(rng))
                foot = r
            else:
                half = rng.uniform(0.15, 0.4, 3)
                yaw = rng.uniform(0, np.pi)
                c, s = np.cos(yaw), np.sin(yaw)
                R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
                cand = _Box(np.array([xy[0], xy[1], half[2]]), half, R, _random_material(rng))
                foot = float(np.linalg.norm(half[:2]))
            if all(np.linalg.norm(xy - q) > foot + f + 0.05 for q, f in placed):
                objects.append(cand)
                placed.append((xy, foot))
                break
    room = [_random_material(rng, "checker") for _ in range(6)]
    lights = np.stack([np.r_[rng.uniform(-2, 2, 2), rng.uniform(2.0, 2.8)] for _ in range(2)])
    return _World(room, objects, lights)


def look_at(center: np.ndarray, target: np.ndarray, roll: float = 0.0) -> Pose:
    """World-to-camera pose (OpenCV axes) at ``center`` looking at ``target`` with z up."""
    f = target - center
    f /= np.linalg.norm(f)
    x = np.cross(f, [0.0, 0.0, 1.0])
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    c, s = np.cos(roll), np.sin(roll)
    x, y = c * x + s * y, -s * x + c * y
    R = np.stack([x, y, f])
    return Pose.from_rt(R, -R @ center)


def _orbit(rng, spec: SceneSpec, world: _World, n_views: int, width: int, height: int):
    target = np.mean([o.center for o in world.objects], 0) if world.objects else np.zeros(3)
    theta0 = rng.uniform(0, 2 * np.pi)
    step = np.deg2rad(rng.uniform(*spec.orbit_step_deg))
    fov = np.deg2rad(rng.uniform(*spec.fov_deg))
    focal = 0.5 * width / np.tan(0.5 * fov)
    poses = []
    for i in range(n_views):
        th = theta0 + i * step + rng.uniform(-0.2, 0.2) * step
        r = rng.uniform(*spec.radius)
        c = np.array([target[0] + r * np.cos(th), target[1] + r * np.sin(th), rng.uniform(*spec.height)])
        if any(obj.contains(c, 0.2) for obj in world.objects) or np.any(np.abs(c[:2]) > ROOM_HALF - 0.2):
            return None
        poses.append(look_at(c, target + rng.uniform(-0.1, 0.1, 3), np.deg2rad(rng.uniform(-3, 3))))
    intr = [Intrinsics(focal, focal, width / 2.0, height / 2.0, width, height) for _ in range(n_views)]
    return CameraSet(poses, intr)


def _render_view(world: _World, pose: Pose, intr: Intrinsics, ss: int):
    H, W = intr.height, intr.width
    R, C = pose.R, pose.center

    def rays(du, dv):
        jj, ii = np.meshgrid(np.arange(W) + du, np.arange(H) + dv)
        dc = np.stack([(jj - intr.cx) / intr.fx, (ii - intr.cy) / intr.fy, np.ones_like(jj)], -1).reshape(-1, 3)
        return np.broadcast_to(C, dc.shape), dc @ R

    o, d = rays(0.5, 0.5)
    t, n, label, albedo, p = world.cast(o, d)
    img = np.zeros((H * W, 3))
    offs = (np.arange(ss) + 0.5) / ss
    for du in offs:
        for dv in offs:
            os_, ds = rays(du, dv)
            _, ns, _, alb, ps = world.cast(os_, ds)
            img += world.shade(ps, ns, alb)
    img /= ss * ss
    return img.reshape(H, W, 3), t.reshape(H, W), (n @ R.T).reshape(H, W, 3), label.reshape(H, W)


def generate_scene(seed: int, n_views: int = 3, height: int = 32, width: int = 32,
                   spec: Optional[SceneSpec] = None) -> SceneSample:
    """A pure function of its arguments; equal inputs give bit-identical samples."""
    if n_views < 2:
        raise ValueError("a scene needs at least two views")
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    for _ in range(spec.max_retries):
        world = _make_world(rng, spec)
        cams = _orbit(rng, spec, world, n_views, width, height)
        if cams is None:
            continue
        views = [_render_view(world, p, k, spec.supersample) for p, k in zip(cams.poses, cams.intrinsics)]
        depths = np.stack([v[1] for v in views])
        if np.all(np.isfinite(depths)) and depths.min() > 0:
            break
    else:
        raise SceneGenerationError(f"seed {seed}: no valid camera rig after {spec.max_retries} attempts")

    rel = relative_to_first(cams)
    scale = normalize_camera_set(rel).normalization.scale
    poses = [Pose(p.quat, p.trans / scale) for p in rel.poses]
    cams = CameraSet(poses, list(rel.intrinsics))
    depths = (depths / scale).astype(np.float32)
    pointmaps = np.stack([backproject(d.astype(np.float64), k, p).points
                          for d, k, p in zip(depths, cams.intrinsics, cams.poses)]).astype(np.float32)
    return SceneSample(
        images=np.stack([v[0] for v in views]).astype(np.float32),
        depths=depths,
        normals=np.stack([v[2] for v in views]).astype(np.float32),
        pointmaps=pointmaps,
        cams=cams,
        valid=np.isfinite(depths) & (depths > 0),
        labels=np.stack([v[3] for v in views]).astype(np.int16),
        seed=seed,
        spec=spec,
        scale=float(scale),
    )


# --------------------------------------------------------------------------
# resolution sampling


def resolution_candidates(policy: ResolutionPolicy, patch: int, multiplier: Optional[float] = None) -> list:
    m = policy.multiplier if multiplier is None else multiplier
    lo, hi = policy.min_pixels * m, policy.max_pixels * m
    out = []
    for h in range(patch, int(hi // patch) + 1, patch):
        for w in range(patch, int(hi // patch) + 1, patch):
            if lo <= h * w <= hi and policy.aspect_min <= h / w <= policy.aspect_max:
                out.append((h, w))
    return out


def sample_resolution(policy: ResolutionPolicy, rng: np.random.Generator, patch: int = 16,
                      multiplier: Optional[float] = None) -> tuple[int, int]:
    """Uniform over (H, W) pairs of patch multiples within the scaled pixel and aspect bounds."""
    cands = resolution_candidates(policy, patch, multiplier)
    if not cands:
        raise ConfigError(f"no {patch}-divisible resolution satisfies {policy} (multiplier {multiplier})")
    return cands[int(rng.integers(len(cands)))]


# --------------------------------------------------------------------------
# persistence


def scene_dir(root: str | os.PathLike, seed: int) -> Path:
    return Path(root) / f"scene_{seed}"


def write_scene(sample: SceneSample, root: str | os.PathLike) -> Path:
    out = scene_dir(root, sample.seed)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(sample.num_views):
        img = np.round(np.clip(sample.images[i], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(img).save(out / f"view_{i}.png")
        write_grid(out / f"depth_{i}.bin", np.where(sample.valid[i], sample.depths[i], 0.0))
        write_grid(out / f"normal_{i}.bin", sample.normals[i])
        write_grid(out / f"pointmap_{i}.bin", sample.pointmaps[i])
        write_grid(out / f"label_{i}.bin", sample.labels[i].astype(np.float32))
    save_cameras(out / "cameras.json", sample.cams)
    manifest = {"format": FORMAT_VERSION, "seed": sample.seed, "views": sample.num_views,
                "height": int(sample.images.shape[1]), "width": int(sample.images.shape[2]),
                "scale": sample.scale, "spec": asdict(sample.spec)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def _manifest_field(doc: dict, key: str, kind):
    if key not in doc:
        raise SceneFormatError(f"manifest: missing field {key!r}")
    if not isinstance(doc[key], kind) or isinstance(doc[key], bool):
        raise SceneFormatError(f"manifest: field {key!r} has wrong type {type(doc[key]).__name__}")
    return doc[key]


def read_scene(path: str | os.PathLike) -> SceneSample:
    path = Path(path)
    try:
        doc = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise SceneFormatError(f"{path}: missing manifest.json") from e
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"{path}: manifest is not valid JSON ({e})") from e
    if _manifest_field(doc, "format", int) != FORMAT_VERSION:
        raise SceneFormatError(f"manifest: unsupported format {doc['format']}")
    n = _manifest_field(doc, "views", int)
    seed = _manifest_field(doc, "seed", int)
    scale = float(_manifest_field(doc, "scale", (int, float)))
    spec_doc = _manifest_field(doc, "spec", dict)
    try:
        spec = SceneSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in spec_doc.items()})
    except TypeError as e:
        raise SceneFormatError(f"manifest: field 'spec' is malformed ({e})") from e

    def need(name):
        p = path / name
        if not p.exists():
            raise SceneFormatError(f"{path}: missing {name}")
        return p

    images, depths, normals, points, labels = [], [], [], [], []
    for i in range(n):
        images.append(np.asarray(Image.open(need(f"view_{i}.png")).convert("RGB"), dtype=np.float32) / 255.0)
        depths.append(read_grid(need(f"depth_{i}.bin")))
        normals.append(read_grid(need(f"normal_{i}.bin")))
        points.append(read_grid(need(f"pointmap_{i}.bin")))
        labels.append(read_grid(need(f"label_{i}.bin")).astype(np.int16))
    depths = np.stack(depths)
    return SceneSample(np.stack(images), depths, np.stack(normals), np.stack(points),
                       load_cameras(need("cameras.json")), depths > 0, np.stack(labels), seed, spec, scale)


def list_scenes(root: str | os.PathLike) -> list:
    return sorted((p for p in Path(root).glob("scene_*") if p.is_dir()), key=lambda p: int(p.name.split("_")[1]))
