"""Command-line entry point: ``priorrecon {gen-data,train,infer,eval,render}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical fault during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .config import ConfigError, ResolutionPolicy, load_config, save_config
from .evalsuite import TASKS, MetricReport, ProtocolError, evaluate_views
from .geomcore import CameraSchemaError, load_cameras, save_cameras
from .gridio import GridFormatError, read_grid, write_grid
from .gsplat import CloudFormatError, TorchCamera, build_cloud, load_cloud, render, save_cloud, voxel_prune
from .inference import predict
from .losses import TrainingFault
from .priors import PriorBundle, PriorContractError
from .synthdata import (SceneFormatError, SceneGenerationError, generate_scene, list_scenes, read_scene,
                        sample_resolution, write_scene)
from .trainer import CheckpointError, Trainer, load_model

log = logging.getLogger("priorrecon")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# gen-data


def _policy(text: str) -> ResolutionPolicy:
    try:
        vals = [float(v) for v in text.split(",")]
        if len(vals) not in (2, 4):
            raise ValueError
    except ValueError:
        raise ConfigError(f"--resolution-policy expects min,max[,aspect_min,aspect_max], got {text!r}") from None
    kw = {"min_pixels": int(vals[0]), "max_pixels": int(vals[1])}
    if len(vals) == 4:
        kw.update(aspect_min=vals[2], aspect_max=vals[3])
    return ResolutionPolicy(**kw)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    policy = _policy(args.resolution_policy) if args.resolution_policy else None
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    seeds = [args.seed + i for i in range(args.scenes)]
    for s in seeds:
        if policy is None:
            h, w = args.height, args.width
        else:
            h, w = sample_resolution(policy, np.random.default_rng([args.seed, s]), args.patch)
        try:
            write_scene(generate_scene(s, args.views, h, w), out)
        except OSError as exc:
            raise DataError(f"cannot write scene {s}: {exc}") from exc
    (out / "dataset.json").write_text(json.dumps({"scenes": seeds, "views": args.views,
                                                 "policy": args.resolution_policy}, indent=1))
    log.info("wrote %d scenes to %s", len(seeds), out)
    return EXIT_OK


# --------------------------------------------------------------------------
# train


def _load_dataset(root) -> list:
    paths = list_scenes(root) if Path(root).is_dir() else []
    if not paths:
        raise DataError(f"no scene_* directories under {root}")
    return [read_scene(p) for p in paths]


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    scenes = _load_dataset(args.data)
    out = Path(args.out)
    if args.resume:
        trainer = Trainer.resume(args.resume, scenes, out, cfg)
    else:
        trainer = Trainer(cfg, scenes, out)
    trainer.run()
    trainer.checkpoint("final")
    log.info("finished %d steps; checkpoints in %s", trainer.global_step, out / "checkpoints")
    return EXIT_OK


# --------------------------------------------------------------------------
# infer


def _read_images(d: Path) -> np.ndarray:
    files = sorted(d.glob("view_*.png"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise DataError(f"no view_*.png images in {d}")
    imgs = [np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0 for f in files]
    if len({im.shape for im in imgs}) != 1:
        raise DataError("input images differ in size")
    return np.stack(imgs)


def _prior_path(flag: Optional[str], default: Path) -> Optional[Path]:
    if flag is None:
        return None
    return Path(flag) if flag else default


def load_priors(args, n: int, h: int, w: int) -> Optional[PriorBundle]:
    src = Path(args.images)
    poses = intr = depths = None
    for flag, attr in ((args.pose_prior, "poses"), (args.intr_prior, "intrinsics")):
        path = _prior_path(flag, src / "cameras.json")
        if path is None:
            continue
        cams = load_cameras(path)
        if len(cams) != n:
            raise PriorContractError(f"{path}: {len(cams)} cameras for {n} views")
        if attr == "poses":
            poses = list(cams.poses)
        else:
            intr = list(cams.intrinsics)
            if any((k.width, k.height) != (w, h) for k in intr):
                raise PriorContractError(f"{path}: intrinsics image size differs from the inputs ({w}x{h})")
    ddir = _prior_path(args.depth_prior, src)
    if ddir is not None:
        files = [ddir / f"depth_{i}.bin" for i in range(n)]
        missing = [f.name for f in files if not f.exists()]
        if missing:
            raise PriorContractError(f"depth prior missing {missing} in {ddir}")
        depths = [read_grid(f).astype(np.float64) for f in files]
        if any(d.shape != (h, w) for d in depths):
            raise PriorContractError("depth prior size differs from the inputs")
        if (ddir / f"depth_{n}.bin").exists():
            raise PriorContractError(f"depth prior has more than {n} views")
    if poses is None and intr is None and depths is None:
        return None
    return PriorBundle(poses, intr, depths)


def cmd_infer(args) -> int:
    model, cfg = load_model(args.ckpt)
    imgs = _read_images(Path(args.images))
    n, h, w, _ = imgs.shape
    priors = load_priors(args, n, h, w)
    images = torch.as_tensor(imgs).permute(0, 3, 1, 2).contiguous()
    pred = predict(model, images, priors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        write_grid(out / f"depth_{i}.bin", pred["depth"][i])
        write_grid(out / f"gs_depth_{i}.bin", pred["gs_depth"][i])
        write_grid(out / f"normal_{i}.bin", pred["normals"][i])
        write_grid(out / f"pointmap_{i}.bin", pred["pointmap"][i])
    cams = pred["cameras"]
    save_cameras(out / "cameras.json", cams)
    # the cloud is lifted with the predicted cameras, so it shares their frame
    tcams = [TorchCamera.from_geom(p, k) for p, k in zip(cams.poses, cams.intrinsics)]
    cloud = build_cloud(torch.as_tensor(pred["gs_depth"], dtype=torch.float32),
                        {k: v.float() for k, v in pred["gs_attrs"].items()}, tcams)
    cloud = voxel_prune(cloud, cfg.render.voxel_size)
    save_cloud(out / "cloud.gsc", cloud, cfg.render.voxel_size, cfg.to_dict())
    with torch.no_grad():
        for i, c in enumerate(tcams):
            r = render(cloud, c, cfg.render.background, cfg.render.dilation, cfg.render.mode)
            _save_png(out / f"render_{i}.png", r["image"].numpy())
    save_config(cfg, out / "config.json")
    (out / "manifest.json").write_text(json.dumps({
        "views": n, "height": h, "width": w, "checkpoint": str(args.ckpt),
        "priors": {"pose": args.pose_prior is not None, "intrinsics": args.intr_prior is not None,
                   "depth": args.depth_prior is not None}}, indent=1))
    log.info("wrote predictions for %d views to %s", n, out)
    return EXIT_OK


def _save_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


# --------------------------------------------------------------------------
# eval


def _scene_dirs(root: Path) -> dict:
    scenes = list_scenes(root)
    return {p.name: p for p in scenes} if scenes else {root.name: root}


def _read_views(d: Path, prefix: str, n: int) -> Optional[np.ndarray]:
    files = [d / f"{prefix}_{i}.bin" for i in range(n)]
    if not all(f.exists() for f in files):
        return None
    return np.stack([read_grid(f) for f in files])


def _read_pngs(d: Path, prefix: str, n: int) -> Optional[np.ndarray]:
    files = [d / f"{prefix}_{i}.png" for i in range(n)]
    if not all(f.exists() for f in files):
        return None
    return np.stack([np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) / 255.0 for f in files])


NEEDS = {"depth": ("depth",), "points": ("pointmap",), "normal": ("normal",), "pose": ("cameras.json",),
         "intrinsics": ("cameras.json",), "nvs": ("render",)}


def _check_layout(pred: Path, gt: Path, tasks, n: int) -> None:
    missing = []
    for t in tasks:
        for item in NEEDS[t]:
            if item.endswith(".json"):
                names_p = names_g = [item]
            elif item == "render":
                names_p, names_g = [f"render_{i}.png" for i in range(n)], [f"view_{i}.png" for i in range(n)]
            else:
                names_p = names_g = [f"{item}_{i}.bin" for i in range(n)]
            missing += [str(pred / x) for x in names_p if not (pred / x).exists()]
            missing += [str(gt / x) for x in names_g if not (gt / x).exists()]
    if missing:
        raise DataError("layout mismatch; missing files: " + ", ".join(sorted(set(missing))))


def cmd_eval(args) -> int:
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    bad = [t for t in tasks if t not in TASKS]
    if bad:
        raise ConfigError(f"unknown tasks {bad}; choose from {list(TASKS)}")
    pred_dirs, gt_dirs = _scene_dirs(Path(args.pred)), _scene_dirs(Path(args.gt))
    if len(pred_dirs) == 1 and len(gt_dirs) == 1:
        pairs = [(next(iter(gt_dirs)), next(iter(pred_dirs.values())), next(iter(gt_dirs.values())))]
    else:
        missing = sorted(set(gt_dirs) - set(pred_dirs))
        if missing:
            raise DataError(f"layout mismatch; no predictions for {missing}")
        pairs = [(k, pred_dirs[k], gt_dirs[k]) for k in gt_dirs]
    per_scene = {}
    for name, pd, gd in pairs:
        gt_scene = read_scene(gd)
        n = gt_scene.num_views
        _check_layout(pd, gd, tasks, n)
        pred = {"depth": _read_views(pd, "depth", n), "pointmap": _read_views(pd, "pointmap", n),
                "normals": _read_views(pd, "normal", n), "images": _read_pngs(pd, "render", n),
                "cameras": load_cameras(pd / "cameras.json") if (pd / "cameras.json").exists() else None}
        gt = {"depth": gt_scene.depths, "pointmap": gt_scene.pointmaps, "normals": gt_scene.normals,
              "images": gt_scene.images, "cameras": gt_scene.cams, "valid": gt_scene.valid}
        per_scene[name] = evaluate_views(pred, gt, tasks)
    report = MetricReport.from_scenes(per_scene, dict(MetricReport().protocol, tasks=tasks))
    js, cs = report.write(args.out)
    print(json.dumps(report.metrics, indent=1, sort_keys=True))
    log.info("report written to %s and %s", js, cs)
    return EXIT_OK


# --------------------------------------------------------------------------
# render


def cmd_render(args) -> int:
    cloud = load_cloud(args.cloud)
    cams = load_cameras(args.camera)
    if not 0 <= args.view < len(cams):
        raise ConfigError(f"--view {args.view} outside 0..{len(cams) - 1}")
    cam = TorchCamera.from_geom(cams.poses[args.view], cams.intrinsics[args.view])
    with torch.no_grad():
        r = render(cloud, cam, tuple(args.background), args.dilation, args.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _save_png(out, r["image"].numpy())
    write_grid(out.with_name(out.stem + "_depth.bin"), r["depth"].numpy())
    log.info("rendered %d Gaussians to %s", len(cloud), out)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="priorrecon", description="Prior-promptable multi-view reconstruction toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic scenes")
    g.add_argument("--out", required=True, help="dataset root")
    g.add_argument("--scenes", type=int, default=10)
    g.add_argument("--views", type=int, default=3)
    g.add_argument("--seed", type=int, default=0, help="first scene seed; scenes use seed, seed+1, ...")
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--resolution-policy", default=None,
                   help="min_pixels,max_pixels[,aspect_min,aspect_max]; samples a resolution per scene")
    g.add_argument("--patch", type=int, default=16, help="resolutions are multiples of this")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the training curriculum")
    t.add_argument("--config", default=None, help="YAML or JSON config file")
    t.add_argument("--data", required=True, help="dataset root from gen-data")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict geometry, cameras and a Gaussian cloud")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--images", required=True, help="directory with view_<i>.png")
    i.add_argument("--pose-prior", nargs="?", const="", default=None,
                   help="camera JSON whose poses are used as priors (default: <images>/cameras.json)")
    i.add_argument("--intr-prior", nargs="?", const="", default=None,
                   help="camera JSON whose intrinsics are used as priors (default: <images>/cameras.json)")
    i.add_argument("--depth-prior", nargs="?", const="", default=None,
                   help="directory with depth_<i>.bin priors (default: <images>)")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True, help="prediction directory or root of scene_* predictions")
    e.add_argument("--gt", required=True, help="scene directory or dataset root")
    e.add_argument("--tasks", default="depth,points,pose,intrinsics,normal", help=f"subset of {','.join(TASKS)}")
    e.add_argument("--out", required=True, help="report path stem (writes .json and .csv)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render a saved Gaussian cloud")
    r.add_argument("--cloud", required=True)
    r.add_argument("--camera", required=True, help="camera JSON")
    r.add_argument("--view", type=int, default=0, help="camera index within the JSON")
    r.add_argument("--out", required=True, help="output PNG; depth goes to <stem>_depth.bin")
    r.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    r.add_argument("--dilation", type=float, default=0.1)
    r.add_argument("--mode", choices=("auto", "dense", "windowed"), default="auto")
    r.set_defaults(func=cmd_render)
    return p


DATA_ERRORS = (DataError, SceneFormatError, SceneGenerationError, CameraSchemaError, CloudFormatError,
               GridFormatError, PriorContractError, CheckpointError, ProtocolError, FileNotFoundError)


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"priorrecon: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"priorrecon: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingFault as exc:
        print(f"priorrecon: numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
