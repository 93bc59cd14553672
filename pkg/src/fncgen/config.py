"""Config schema: five sections mirroring the pipeline stages, strict keys,
defaults echoed into every run snapshot."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import CohortConfig
from .errors import ConfigError
from .losses import LossWeights


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 4
    ffn_hidden: int = 128
    fragment_side: int = 2
    disc_patch: int = 4
    perceptual_patch: int = 4
    perceptual_blocks: tuple[int, ...] = (2,)
    perceptual_seed: int = 1234

    def __post_init__(self):
        for name in ("patch_size", "d_model", "n_heads", "n_blocks", "ffn_hidden",
                     "fragment_side", "disc_patch", "perceptual_patch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"model.n_heads {self.n_heads} must divide d_model {self.d_model}")
        if not self.perceptual_blocks:
            raise ConfigError("model.perceptual_blocks must name at least one block")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-4
    milestones: tuple[int, ...] = (50, 150)
    gamma: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    cv_folds: int = 10
    class_identifier: bool = True
    use_corr_loss: bool = True
    use_perceptual_loss: bool = True
    seed: int = 7
    eval_every: int = 1
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if any(b >= a for a, b in zip(self.milestones[1:], self.milestones)):
            raise ConfigError(f"train.milestones must be strictly increasing, got {self.milestones}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"train.gamma must be in (0,1], got {self.gamma}")
        if self.cv_folds < 2:
            raise ConfigError(f"train.cv_folds must be >= 2, got {self.cv_folds}")
        if self.eval_every < 1:
            raise ConfigError(f"train.eval_every must be >= 1, got {self.eval_every}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"train.checkpoint_every must be >= 0, got {self.checkpoint_every}")


@dataclass(frozen=True)
class EvalConfig:
    batch_size: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"eval.batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class Config:
    data: CohortConfig
    model: ModelConfig
    train: TrainConfig
    losses: LossWeights
    eval: EvalConfig

    def effective_weights(self) -> LossWeights:
        """Loss weights after the ablation flags zero out gated terms."""
        return LossWeights(
            lambda1=self.losses.lambda1,
            lambda2=self.losses.lambda2 if self.train.use_perceptual_loss else 0.0,
            lambda3=self.losses.lambda3 if self.train.use_corr_loss else 0.0,
        )

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "losses": asdict(self.losses),
            "eval": asdict(self.eval),
        }

    def canonical_json(self) -> str:
        def norm(obj):
            if isinstance(obj, dict):
                return {k: norm(v) for k, v in sorted(obj.items())}
            if isinstance(obj, (list, tuple)):
                return [norm(v) for v in obj]
            return obj

        return json.dumps(norm(self.to_dict()), sort_keys=True, separators=(",", ":"))

    def hash(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).digest()


_SECTIONS = {
    "data": CohortConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "losses": LossWeights,
    "eval": EvalConfig,
}


def _build_section(cls, section: str, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {section!r} must be a JSON object, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} in section {section!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name in raw:
            value = raw[f.name]
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> Config:
    for key in raw:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section {key!r} (expected one of {sorted(_SECTIONS)})")
    sections = {
        name: _build_section(cls, name, raw.get(name, {}))
        for name, cls in _SECTIONS.items()
    }
    return Config(**sections)


def default_config() -> Config:
    return config_from_dict({})


def load_config(path=None) -> Config:
    """Parse a JSON config file; missing fields take defaults. None = all defaults."""
    if path is None:
        return default_config()
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    return config_from_dict(raw)


def save_config_snapshot(cfg: Config, run_dir, meta: dict | None = None) -> None:
    """Write the fully-resolved config (defaults applied) into a run directory.

    The snapshot is itself a valid config file, so a run can be reproduced
    with `--config <run>/config.json`; run metadata lives in meta.json.
    """
    run_dir = Path(run_dir)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if meta:
        (run_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_config_snapshot(run_dir) -> tuple[Config, dict]:
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.json")
    meta_path = run_dir / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return cfg, meta
