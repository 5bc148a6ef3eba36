"""Compare the single-token prior embedding against the dense per-patch variant.

Both models are trained with the same data and schedule; each is evaluated on
held-out scenes without priors and with all priors.
"""

import argparse
import logging

from priorrecon.experiments import ablation_config, prior_ablation

COLUMNS = ("abs_rel", "inlier_1.03", "point_tau_1.03", "auc@5")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--train-scenes", type=int, default=200)
    ap.add_argument("--test-scenes", type=int, default=20)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    print(f"{'embedding':<14}{'priors':<8}" + "".join(f"{c:>16}" for c in COLUMNS))
    for emb in ("single_token", "dense"):
        res = prior_ablation(args.root, ablation_config(args.epochs, prior_embedding=emb), range(args.train_scenes),
                             range(10_000, 10_000 + args.test_scenes), settings=("none", "all"),
                             tag=f"embedding_{emb}")
        for name, rep in res["reports"].items():
            print(f"{emb:<14}{name:<8}" + "".join(f"{rep.metrics[c]:>16.4f}" for c in COLUMNS))


if __name__ == "__main__":
    main()
