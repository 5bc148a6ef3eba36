"""Overfit the desk-scale model on three synthetic scenes and report training-scene metrics.

    python3 scripts/overfit.py --root runs --out runs/overfit_report
"""

import argparse
import json
import logging

from priorrecon.experiments import overfit_config, overfit_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs", help="cache directory for trained runs")
    ap.add_argument("--out", default=None, help="report stem (.json/.csv)")
    ap.add_argument("--epochs", default="300,200,150", help="epochs per stage")
    ap.add_argument("--lr-scale", type=float, default=5.0)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--patch", type=int, default=8)
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = overfit_config(tuple(int(e) for e in args.epochs.split(",")), args.lr_scale, size=args.size,
                         patch=args.patch)
    res = overfit_experiment(args.root, [int(s) for s in args.seeds.split(",")], cfg)
    if args.out:
        res["report"].write(args.out)
    print(json.dumps(res["report"].metrics, indent=1, sort_keys=True))
    print(f"steps {res['info']['steps']}  train seconds {res['info']['seconds']:.0f}  cached {res['info']['cached']}")


if __name__ == "__main__":
    main()
