"""Train one model with prior dropout and compare held-out metrics under each prior setting."""

import argparse
import logging

from priorrecon.experiments import PRIOR_SETTINGS, ablation_config, prior_ablation

COLUMNS = ("abs_rel", "inlier_1.03", "point_tau_1.03", "auc@5", "rra@5", "rta@5", "focal_error")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="runs")
    ap.add_argument("--out", default=None, help="directory for per-setting reports")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--train-scenes", type=int, default=200)
    ap.add_argument("--test-scenes", type=int, default=20)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    res = prior_ablation(args.root, ablation_config(args.epochs), range(args.train_scenes),
                         range(10_000, 10_000 + args.test_scenes))
    print(f"{'priors':<12}" + "".join(f"{c:>16}" for c in COLUMNS))
    for name in PRIOR_SETTINGS:
        rep = res["reports"][name]
        print(f"{name:<12}" + "".join(f"{rep.metrics[c]:>16.4f}" for c in COLUMNS))
        if args.out:
            rep.write(f"{args.out}/{name}")


if __name__ == "__main__":
    main()
