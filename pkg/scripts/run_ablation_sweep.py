"""Seed sweep comparing the full model against its ablations on one cohort.

For each seed, trains the full model, the no-class-identifier variant, and the
no-correlation/no-perceptual variant, then prints a table of held-out
group-difference Pearson scores.

Usage:
    python3 scripts/run_ablation_sweep.py --data out/experiment/data --seeds 1 2 3
"""

import argparse
import sys
from pathlib import Path

from fncgen.config import config_from_dict
from fncgen.data import read_dataset
from fncgen.train import run_cv

VARIANTS = {
    "full": {},
    "no-class-id": {"class_identifier": False},
    "no-corr-no-perc": {"use_corr_loss": False, "use_perceptual_loss": False},
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", type=Path, required=True)
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--cv", type=int, default=2)
    parser.add_argument("--eval-every", type=int, default=10)
    args = parser.parse_args()

    dataset = read_dataset(args.data)
    rows = []
    for seed in args.seeds:
        scores = {}
        for name, flags in VARIANTS.items():
            cfg = config_from_dict({"train": {
                "epochs": args.epochs, "cv_folds": args.cv, "seed": seed,
                "eval_every": args.eval_every, **flags,
            }})
            result = run_cv(dataset.records, cfg, k=args.cv, partition=dataset.partition)
            scores[name] = result.aggregate["group_diff_pearson"]["mean"]
            print(f"seed {seed} {name}: group_diff_pearson={scores[name]:.4f}", flush=True)
        rows.append((seed, scores))

    print(f"\n{'seed':>4}  " + "  ".join(f"{name:>16}" for name in VARIANTS))
    for seed, scores in rows:
        print(f"{seed:>4}  " + "  ".join(f"{scores[name]:>16.4f}" for name in VARIANTS))
    return 0


if __name__ == "__main__":
    sys.exit(main())
