"""End-to-end experiment: synthesize the default cohort, train with 2-fold CV,
evaluate, and export the group-difference matrices for heatmap plotting.

Usage:
    python3 scripts/run_full_experiment.py --workdir out/experiment [--epochs 100]
"""

import argparse
import sys
from pathlib import Path

from fncgen.cli import main as fncgen_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", type=Path, default=Path("out/experiment"))
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--cv", type=int, default=2)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    data_dir = args.workdir / "data"
    run_dir = args.workdir / "run"
    if not (data_dir / "manifest.json").exists():
        code = fncgen_main(["gen-data", "--out", str(data_dir), "--seed", str(args.seed)])
        if code != 0:
            return code
    code = fncgen_main([
        "train", "--data", str(data_dir), "--out", str(run_dir),
        "--cv", str(args.cv), "--epochs", str(args.epochs), "--seed", str(args.seed),
        "--force",
    ])
    if code != 0:
        return code
    for fold in range(args.cv):
        code = fncgen_main(["eval", "--run", str(run_dir), "--data", str(data_dir),
                            "--fold", str(fold)])
        if code != 0:
            return code
    print(f"artifacts in {run_dir}/reports (JSON reports + CSV matrices)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
