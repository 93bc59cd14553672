"""Binary checkpoint format: every network parameter by name, both optimizer
states, the training RNG state, and a config hash guarding resumption."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"FNCK"
VERSION = 1


@dataclass
class Checkpoint:
    config_hash: bytes
    epoch: int
    generator: dict[str, np.ndarray]
    discriminator: dict[str, np.ndarray]
    perceptual: dict[str, np.ndarray]
    opt_g: dict
    opt_d: dict
    rng_state: dict


def _write_params(fh, params: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype=np.float64)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
        fh.write(a.astype("<f8").tobytes())


def _write_optimizer(fh, state: dict) -> None:
    fh.write(struct.pack("<I", int(state["step_count"])))
    fh.write(struct.pack("<5d", state["lr"], state["beta1"], state["beta2"],
                         state["eps"], state["weight_decay"]))
    _write_params(fh, state["m"])
    _write_params(fh, state["v"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    if len(ckpt.config_hash) != 32:
        raise FormatError(f"config hash must be 32 bytes, got {len(ckpt.config_hash)}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(ckpt.config_hash)
        fh.write(struct.pack("<I", ckpt.epoch))
        _write_params(fh, ckpt.generator)
        _write_params(fh, ckpt.discriminator)
        _write_params(fh, ckpt.perceptual)
        _write_optimizer(fh, ckpt.opt_g)
        _write_optimizer(fh, ckpt.opt_d)
        rng_raw = json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(rng_raw)))
        fh.write(rng_raw)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint (needed {n} bytes at offset {self.off})")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self, count: int) -> tuple:
        return struct.unpack(f"<{count}d", self.take(8 * count))


def _read_params(r: _Reader) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank))) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(shape)
    return out


def _read_optimizer(r: _Reader) -> dict:
    step_count = r.u32()
    lr, beta1, beta2, eps, weight_decay = r.f64(5)
    return {
        "step_count": step_count,
        "lr": lr, "beta1": beta1, "beta2": beta2, "eps": eps, "weight_decay": weight_decay,
        "m": _read_params(r),
        "v": _read_params(r),
    }


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config_hash = r.take(32)
    epoch = r.u32()
    generator = _read_params(r)
    discriminator = _read_params(r)
    perceptual = _read_params(r)
    opt_g = _read_optimizer(r)
    opt_d = _read_optimizer(r)
    rng_raw = r.take(r.u32())
    try:
        rng_state = json.loads(rng_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt RNG state block ({exc})") from exc
    if r.off != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.off} trailing bytes after checkpoint payload")
    return Checkpoint(
        config_hash=config_hash,
        epoch=epoch,
        generator=generator,
        discriminator=discriminator,
        perceptual=perceptual,
        opt_g=opt_g,
        opt_d=opt_d,
        rng_state=rng_state,
    )


def assign_named(params: dict[str, "np.ndarray"], tensors: dict) -> None:
    """Copy checkpoint arrays into live parameter tensors by name."""
    missing = set(tensors) - set(params)
    extra = set(params) - set(tensors)
    if missing or extra:
        raise FormatError(
            f"checkpoint parameter names do not match model: missing={sorted(missing)[:3]} "
            f"extra={sorted(extra)[:3]}"
        )
    for name, arr in params.items():
        t = tensors[name]
        if t.data.shape != arr.shape:
            raise FormatError(f"parameter {name!r}: checkpoint shape {arr.shape} != model {t.data.shape}")
        t.data = arr.copy()
