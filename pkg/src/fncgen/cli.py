"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (including divergence aborts),
2 usage or validation errors. Seed precedence: --seed flag, then the
FNCGEN_SEED environment variable, then the config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from .config import Config, load_config, load_config_snapshot, save_config_snapshot
from .checkpoint import assign_named, load_checkpoint
from .errors import ConfigError, ContractError, FormatError, ShapeError, TrainingDiverged
from .metrics import evaluate, write_matrix_csv
from .train import build_models, run_cv

from . import tensor as T


def resolve_seed(flag_seed: int | None, config_seed: int) -> int:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("FNCGEN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"FNCGEN_SEED must be an integer, got {env!r}") from None
    return config_seed


def _require_fresh_dir(path: Path, force: bool, what: str) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{what} {path} is not empty; pass --force to overwrite")


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg.data.seed)
    data_cfg = dataclasses.replace(cfg.data, seed=seed)
    out = Path(args.out)
    _require_fresh_dir(out, args.force, "output directory")
    if args.dry_run:
        print(f"dry-run ok: would write {data_cfg.n_subjects} subjects to {out}")
        return 0
    records, gt = D.make_cohort(data_cfg)
    D.write_dataset(out, records, ground_truth=gt)
    diff = D.ground_truth_group_diff(gt, n_mc=2000, seed=seed)
    n_hc = sum(1 for r in records if r.label == 0)
    print(f"wrote {len(records)} subjects ({n_hc} HC / {len(records) - n_hc} SZ) to {out}")
    print(f"ground truth: class effect {data_cfg.class_effect}, "
          f"max |group diff| entry {np.abs(diff).max():.4f}")
    return 0


def _apply_train_overrides(cfg: Config, args) -> Config:
    train = cfg.train
    updates: dict = {}
    if args.seed is not None or os.environ.get("FNCGEN_SEED") is not None:
        updates["seed"] = resolve_seed(args.seed, train.seed)
    if args.epochs is not None:
        updates["epochs"] = args.epochs
    if args.cv is not None:
        updates["cv_folds"] = args.cv
    if args.no_class_id:
        updates["class_identifier"] = False
    if args.no_corr_loss:
        updates["use_corr_loss"] = False
    if args.no_perc_loss:
        updates["use_perceptual_loss"] = False
    if updates:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(train, **updates))
    return cfg


def cmd_train(args) -> int:
    cfg = _apply_train_overrides(load_config(args.config), args)
    dataset = D.read_dataset(args.data)
    k = cfg.train.cv_folds
    if len(dataset.records) < k:
        raise ConfigError(f"dataset has {len(dataset.records)} subjects, fewer than {k} folds")
    if args.fold is not None and not 0 <= args.fold < k:
        raise ConfigError(f"--fold {args.fold} out of range for {k} folds")
    run_dir = Path(args.out)
    _require_fresh_dir(run_dir, args.force, "run directory")
    if args.dry_run:
        print(f"dry-run ok: would train {k} fold(s) on {len(dataset.records)} subjects into {run_dir}")
        return 0
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config_snapshot(cfg, run_dir, meta={
        "data_dir": str(Path(args.data).resolve()),
        "cv_folds": k,
        "command": "train",
        "version": __version__,
    })
    result = run_cv(dataset.records, cfg, run_dir=run_dir, k=k,
                    only_fold=args.fold, partition=dataset.partition)
    for fold in result.folds:
        print(f"fold {fold.fold}: group_diff_pearson={fold.report.group_diff_pearson:.4f} "
              f"mean_pearson={fold.report.mean_pearson:.4f}")
    agg = result.aggregate["group_diff_pearson"]
    print(f"aggregate group_diff_pearson: {agg['mean']:.4f} +/- {agg['std']:.4f}")
    return 0


def _load_run(run_dir: Path, fold: int, data_dir: str | None):
    cfg, meta = load_config_snapshot(run_dir)
    source = data_dir or meta.get("data_dir")
    if not source:
        raise ConfigError(f"{run_dir}: no dataset directory recorded in meta.json; pass --data")
    dataset = D.read_dataset(source)
    ckpt_path = run_dir / "checkpoints" / f"fold{fold}_final.fnck"
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.config_hash != cfg.hash():
        raise FormatError(f"{ckpt_path}: checkpoint config hash does not match the run snapshot")
    gen, disc, perc = build_models(cfg, dataset.volume_dims, dataset.fnc_order,
                                   (cfg.train.seed, fold))
    assign_named(ckpt.generator, gen.named_params())
    assign_named(ckpt.discriminator, disc.named_params())
    assign_named(ckpt.perceptual, perc.named_params())
    return cfg, meta, dataset, gen


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg, meta, dataset, gen = _load_run(run_dir, args.fold, args.data)
    k = meta.get("cv_folds", cfg.train.cv_folds)
    ids = [r.id for r in dataset.records]
    labels = [r.label for r in dataset.records]
    split = D.stratified_kfold(ids, labels, k, cfg.train.seed)
    val_ids = split.val_ids(args.fold)
    if args.dry_run:
        print(f"dry-run ok: would evaluate fold {args.fold} on {len(val_ids)} subjects")
        return 0

    def genfn(recs):
        vols = np.stack([r.volume for r in recs])
        lab = np.array([r.label for r in recs])
        with T.no_grad():
            return gen.forward(vols, lab).data

    report = evaluate(genfn, dataset.records, val_ids, dataset.partition,
                      batch_size=cfg.eval.batch_size, config_echo=cfg.to_dict(),
                      seeds={"seed": cfg.train.seed, "fold": args.fold})
    reports_dir = run_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    report_path = Path(args.report) if args.report else reports_dir / f"fold{args.fold}_eval.json"
    report.save(report_path)
    write_matrix_csv(np.array(report.group_diff_generated),
                     reports_dir / f"fold{args.fold}_diff_generated.csv")
    write_matrix_csv(np.array(report.group_diff_real),
                     reports_dir / f"fold{args.fold}_diff_real.csv")
    print(f"fold {args.fold}: group_diff_pearson={report.group_diff_pearson:.4f} "
          f"group_diff_cosine={report.group_diff_cosine:.4f} "
          f"mean_pearson={report.mean_pearson:.4f} mean_cosine={report.mean_cosine:.4f} "
          f"-> {report_path}")
    return 0


def cmd_synth(args) -> int:
    run_dir = Path(args.run)
    cfg, meta, dataset, gen = _load_run(run_dir, args.fold, args.data)
    record = dataset.by_id().get(args.subject)
    if record is None:
        raise ContractError(f"unknown subject {args.subject!r} in dataset")
    label = record.label if args.klass is None else D.CLASS_NAMES.index(args.klass)
    if args.dry_run:
        print(f"dry-run ok: would synthesize {args.subject} as {D.CLASS_NAMES[label]}")
        return 0
    matrix = gen.generate(record.volume, label)
    D.write_fnc(args.out, matrix)
    print(f"wrote {args.out} for {args.subject} conditioned on {D.CLASS_NAMES[label]}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_gradcheck

    if args.dry_run:
        print("dry-run ok: would run the gradient-check suite")
        return 0
    results = run_gradcheck(seed=args.seed if args.seed is not None else 0)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} gradient check(s) FAILED", file=sys.stderr)
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fncgen",
        description="Synthesize functional connectivity matrices from 3D structural "
                    "volumes with a conditional ViT-GAN.",
    )
    parser.add_argument("--version", action="version", version=f"fncgen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic cohort on disk")
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--out", type=Path, required=True, help="dataset directory to create")
    p.add_argument("--seed", type=int, help="override the cohort seed")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.add_argument("--dry-run", action="store_true", help="validate only, write nothing")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the model with cross-validation")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--out", type=Path, required=True, help="run directory to create")
    p.add_argument("--fold", type=int, help="train only this fold index")
    p.add_argument("--cv", type=int, help="number of cross-validation folds")
    p.add_argument("--no-class-id", action="store_true",
                   help="disable the class identifier (ablation)")
    p.add_argument("--no-corr-loss", action="store_true",
                   help="disable the correlation loss term (ablation)")
    p.add_argument("--no-perc-loss", action="store_true",
                   help="disable the perceptual loss term (ablation)")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--epochs", type=int, help="override the epoch count")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty run directory")
    p.add_argument("--dry-run", action="store_true", help="validate only, write nothing")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained fold on its held-out split")
    p.add_argument("--run", type=Path, required=True, help="run directory")
    p.add_argument("--data", type=Path, help="dataset directory (defaults to the run's)")
    p.add_argument("--fold", type=int, default=0, help="fold index (default 0)")
    p.add_argument("--report", type=Path, help="report output path")
    p.add_argument("--dry-run", action="store_true", help="validate only, write nothing")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="synthesize one subject's connectivity matrix")
    p.add_argument("--run", type=Path, required=True, help="run directory")
    p.add_argument("--data", type=Path, help="dataset directory (defaults to the run's)")
    p.add_argument("--subject", required=True, help="subject id")
    p.add_argument("--class", dest="klass", choices=D.CLASS_NAMES,
                   help="condition on this class (default: the subject's own)")
    p.add_argument("--fold", type=int, default=0, help="fold checkpoint to use (default 0)")
    p.add_argument("--out", type=Path, required=True, help="output .fnc path")
    p.add_argument("--dry-run", action="store_true", help="validate only, write nothing")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss path")
    p.add_argument("--seed", type=int, help="suite seed (default 0)")
    p.add_argument("--dry-run", action="store_true", help="validate only, run nothing")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, FormatError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
