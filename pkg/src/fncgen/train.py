"""Deterministic adversarial training: alternating D/G AdamW steps, multistep
learning rate, per-epoch held-out evaluation, checkpointing, and fold
orchestration."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import losses as L
from . import tensor as T
from .checkpoint import Checkpoint, assign_named, load_checkpoint, save_checkpoint
from .config import Config
from .data import SubjectRecord, stratified_kfold
from .discriminator import Discriminator, FeatureExtractor
from .errors import ConfigError, FormatError, TrainingDiverged
from .generator import Generator
from .layers import patchify3d
from .metrics import DomainPartition, EvalReport, default_partition, evaluate
from .optim import AdamW, lr_at
from .tensor import Tensor

LOG_KEYS = ("epoch", "lr", "d_loss", "g_gan", "g_mse", "g_perc", "g_corr",
            "g_total", "eval_pearson", "eval_cosine")

# per-fold seed streams: (seed, fold, tag)
_G_INIT, _D_INIT, _SHUFFLE = 0, 1, 2


@dataclass
class FoldResult:
    fold: int
    log: list[dict]
    report: EvalReport
    checkpoint_path: Path | None


def build_models(cfg: Config, vol_dims: tuple[int, int, int], fnc_order: int,
                 fold_seed: tuple) -> tuple[Generator, Discriminator, FeatureExtractor]:
    m = cfg.model
    conditioned = cfg.train.class_identifier
    gen = Generator(
        vol_dims=vol_dims, patch=m.patch_size, d_model=m.d_model, n_heads=m.n_heads,
        n_blocks=m.n_blocks, ffn_hidden=m.ffn_hidden, fnc_order=fnc_order,
        fragment_side=m.fragment_side, class_conditioning=conditioned,
        rng=np.random.default_rng(np.random.SeedSequence(fold_seed + (_G_INIT,))),
    )
    disc = Discriminator(
        fnc_order=fnc_order, patch=m.disc_patch, d_model=m.d_model, n_heads=m.n_heads,
        n_blocks=m.n_blocks, ffn_hidden=m.ffn_hidden, class_conditioning=conditioned,
        rng=np.random.default_rng(np.random.SeedSequence(fold_seed + (_D_INIT,))),
    )
    # the perceptual reference is one fixed network per config, not per fold
    perc = FeatureExtractor(
        fnc_order=fnc_order, patch=m.perceptual_patch, d_model=m.d_model,
        n_heads=m.n_heads, n_blocks=m.n_blocks, ffn_hidden=m.ffn_hidden,
        seed=m.perceptual_seed,
    )
    if max(cfg.model.perceptual_blocks) > len(perc.encoder.blocks):
        raise ConfigError(
            f"model.perceptual_blocks {cfg.model.perceptual_blocks} exceed "
            f"{len(perc.encoder.blocks)} feature blocks"
        )
    return gen, disc, perc


def _set_requires_grad(params: dict[str, Tensor], flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag


def _check_finite(terms: dict[str, float], epoch: int, batch: int) -> None:
    for name, value in terms.items():
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss term {name!r} ({value}) at epoch {epoch}, batch {batch}"
            )


def train_fold(records: list[SubjectRecord], train_ids: list[str], val_ids: list[str],
               fold_idx: int, cfg: Config, run_dir: Path | None = None,
               partition: DomainPartition | None = None,
               resume_from: Path | None = None) -> FoldResult:
    """Train one fold to completion; deterministic given (config, dataset, fold)."""
    by_id = {r.id: r for r in records}
    vol_dims = by_id[train_ids[0]].volume.shape
    fnc_order = by_id[train_ids[0]].fnc.shape[0]
    partition = partition or default_partition(fnc_order)
    weights = cfg.effective_weights()
    use_mse = weights.lambda1 > 0
    use_perc = cfg.train.use_perceptual_loss and weights.lambda2 > 0
    use_corr = cfg.train.use_corr_loss and weights.lambda3 > 0

    fold_seed = (cfg.train.seed, fold_idx)
    gen, disc, perc = build_models(cfg, vol_dims, fnc_order, fold_seed)
    gen_params, disc_params = gen.named_params(), disc.named_params()
    opt_g = AdamW(gen_params, lr=cfg.train.lr, betas=(cfg.train.beta1, cfg.train.beta2),
                  eps=cfg.train.adam_eps, weight_decay=cfg.train.weight_decay)
    opt_d = AdamW(disc_params, lr=cfg.train.lr, betas=(cfg.train.beta1, cfg.train.beta2),
                  eps=cfg.train.adam_eps, weight_decay=cfg.train.weight_decay)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(fold_seed + (_SHUFFLE,)))

    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config_hash != cfg.hash():
            raise FormatError(
                f"{resume_from}: checkpoint config hash does not match the current config"
            )
        assign_named(ckpt.generator, gen_params)
        assign_named(ckpt.discriminator, disc_params)
        assign_named(ckpt.perceptual, perc.named_params())
        opt_g.load_state_dict(ckpt.opt_g)
        opt_d.load_state_dict(ckpt.opt_d)
        shuffle_rng.bit_generator.state = ckpt.rng_state
        start_epoch = ckpt.epoch

    # constant per-subject inputs, cut once
    patches_by_id = {
        sid: patchify3d(Tensor(by_id[sid].volume), cfg.model.patch_size).data
        for sid in set(train_ids) | set(val_ids)
    }
    fncs_by_id = {sid: by_id[sid].fnc for sid in train_ids}
    perc_cache: dict[str, list[np.ndarray]] = {}

    def real_features(batch_ids: list[str]) -> list[Tensor]:
        missing = [s for s in batch_ids if s not in perc_cache]
        if missing:
            with T.no_grad():
                sel = np.stack([fncs_by_id[s] for s in missing])
                feats = perc.extract_features(sel)
            for row, sid in enumerate(missing):
                perc_cache[sid] = [f.data[row] for f in feats]
        stacked = [
            Tensor(np.stack([perc_cache[s][b] for s in batch_ids]))
            for b in range(len(perc.encoder.blocks))
        ]
        return stacked

    def eval_genfn(recs: list[SubjectRecord]) -> np.ndarray:
        stacked = np.stack([patches_by_id[r.id] for r in recs])
        labels = np.array([r.label for r in recs])
        with T.no_grad():
            return gen.forward_patches(stacked, labels).data

    def run_eval() -> EvalReport:
        return evaluate(eval_genfn, records, val_ids, partition,
                        batch_size=cfg.eval.batch_size, config_echo=cfg.to_dict(),
                        seeds={"seed": cfg.train.seed, "fold": fold_idx})

    checkpoint_dir = run_dir / "checkpoints" if run_dir else None
    log_path = run_dir / "logs" / f"fold{fold_idx}.jsonl" if run_dir else None
    if checkpoint_dir:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    if log_path:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        if start_epoch == 0 and log_path.exists():
            log_path.unlink()

    def save_ckpt(path: Path, epoch: int) -> None:
        save_checkpoint(path, Checkpoint(
            config_hash=cfg.hash(),
            epoch=epoch,
            generator={k: p.data for k, p in gen_params.items()},
            discriminator={k: p.data for k, p in disc_params.items()},
            perceptual={k: p.data for k, p in perc.named_params().items()},
            opt_g=opt_g.state_dict(),
            opt_d=opt_d.state_dict(),
            rng_state=shuffle_rng.bit_generator.state,
        ))

    log_rows: list[dict] = []
    report: EvalReport | None = None
    train_list = list(train_ids)
    bs = cfg.train.batch_size

    for epoch in range(start_epoch, cfg.train.epochs):
        lr = lr_at(epoch, cfg.train.lr, cfg.train.milestones, cfg.train.gamma)
        opt_g.lr = opt_d.lr = lr
        perm = shuffle_rng.permutation(len(train_list))
        sums = {"d_loss": 0.0, "g_gan": 0.0, "g_mse": 0.0, "g_perc": 0.0,
                "g_corr": 0.0, "g_total": 0.0}
        seen = 0
        for batch_idx, lo in enumerate(range(0, len(perm), bs)):
            batch_ids = [train_list[i] for i in perm[lo:lo + bs]]
            bp = np.stack([patches_by_id[s] for s in batch_ids])
            bl = np.array([by_id[s].label for s in batch_ids])
            y_real = Tensor(np.stack([fncs_by_id[s] for s in batch_ids]))

            y_hat = gen.forward_patches(bp, bl)

            # one D forward over [real; detached fake] halves the dispatch cost
            both = Tensor(np.concatenate([y_real.data, y_hat.data]))
            logits = disc.forward(both, np.concatenate([bl, bl]))
            loss_d = L.d_loss(logits[:len(batch_ids)], logits[len(batch_ids):])
            opt_d.zero_grad()
            T.backward(loss_d)
            opt_d.step()

            # gradients of the generator objective must not touch D buffers
            _set_requires_grad(disc_params, False)
            gan = L.g_adv_loss(disc.forward(y_hat, bl))
            mse = L.mse_loss(y_real, y_hat) if use_mse else Tensor(0.0)
            perc_term = (
                L.perceptual_loss(y_real, y_hat, perc, cfg.model.perceptual_blocks,
                                  real_features=real_features(batch_ids))
                if use_perc else Tensor(0.0)
            )
            corr_term = L.correlation_loss(y_real, y_hat) if use_corr else Tensor(0.0)
            total = L.total_g_loss(gan, mse, perc_term, corr_term, weights)
            opt_g.zero_grad()
            T.backward(total)
            opt_g.step()
            _set_requires_grad(disc_params, True)

            terms = {
                "d_loss": loss_d.item(), "g_gan": gan.item(), "g_mse": mse.item(),
                "g_perc": perc_term.item(), "g_corr": corr_term.item(),
                "g_total": total.item(),
            }
            _check_finite(terms, epoch, batch_idx)
            for key, value in terms.items():
                sums[key] += value * len(batch_ids)
            seen += len(batch_ids)

        row = {"epoch": epoch, "lr": lr}
        row.update({k: sums[k] / seen for k in sums})
        if (epoch + 1) % cfg.train.eval_every == 0 or epoch + 1 == cfg.train.epochs:
            report = run_eval()
            row["eval_pearson"] = report.mean_pearson
            row["eval_cosine"] = report.mean_cosine
        else:
            row["eval_pearson"] = None
            row["eval_cosine"] = None
        log_rows.append(row)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if checkpoint_dir and cfg.train.checkpoint_every and (epoch + 1) % cfg.train.checkpoint_every == 0:
            save_ckpt(checkpoint_dir / f"fold{fold_idx}_epoch{epoch + 1:04d}.fnck", epoch + 1)

    if report is None:
        report = run_eval()
    ckpt_path = None
    if checkpoint_dir:
        ckpt_path = checkpoint_dir / f"fold{fold_idx}_final.fnck"
        save_ckpt(ckpt_path, cfg.train.epochs)
    if run_dir:
        reports_dir = run_dir / "reports"
        reports_dir.mkdir(parents=True, exist_ok=True)
        report.save(reports_dir / f"fold{fold_idx}_eval.json")
    return FoldResult(fold=fold_idx, log=log_rows, report=report, checkpoint_path=ckpt_path)


@dataclass
class CVResult:
    folds: list[FoldResult]
    aggregate: dict


_AGG_METRICS = ("mean_pearson", "mean_cosine", "group_diff_pearson", "group_diff_cosine")


def aggregate_reports(results: list[FoldResult]) -> dict:
    out = {}
    for metric in _AGG_METRICS:
        values = [getattr(r.report, metric) for r in results]
        out[metric] = {"mean": float(np.mean(values)), "std": float(np.std(values)),
                       "folds": [float(v) for v in values]}
    return out


def run_cv(records: list[SubjectRecord], cfg: Config, run_dir: Path | None = None,
           k: int | None = None, only_fold: int | None = None,
           partition: DomainPartition | None = None) -> CVResult:
    """Train each fold with its own derived seed and aggregate final metrics."""
    k = k or cfg.train.cv_folds
    ids = [r.id for r in records]
    labels = [r.label for r in records]
    split = stratified_kfold(ids, labels, k, cfg.train.seed)
    fold_indices = range(k) if only_fold is None else [only_fold]
    results = [
        train_fold(records, split.train_ids(i), split.val_ids(i), i, cfg,
                   run_dir=run_dir, partition=partition)
        for i in fold_indices
    ]
    aggregate = aggregate_reports(results)
    if run_dir:
        reports_dir = run_dir / "reports"
        reports_dir.mkdir(parents=True, exist_ok=True)
        (reports_dir / "aggregate.json").write_text(
            json.dumps(aggregate, indent=2, sort_keys=True) + "\n"
        )
    return CVResult(folds=results, aggregate=aggregate)
