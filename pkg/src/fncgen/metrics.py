"""Evaluation machinery: Pearson/cosine similarity, group-difference matrices,
per-domain block tables, and the serialized evaluation report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError

DEGENERATE_EPS = 1e-12


@lru_cache(maxsize=None)
def triangle_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/col indices of the off-diagonal upper triangle, row-major (i < j)."""
    return np.triu_indices(n, k=1)


def triangle(mat: np.ndarray) -> np.ndarray:
    """Vectorize [n,n] (or [B,n,n]) matrices to their n(n-1)/2 triangle entries."""
    m = np.asarray(mat)
    rows, cols = triangle_indices(m.shape[-1])
    return m[..., rows, cols]


def pearson_flagged(a: Sequence[float], b: Sequence[float]) -> tuple[float, bool]:
    """Pearson r and a degeneracy flag (variance below 1e-12 reports r=0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"pearson needs equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ContractError(f"pearson needs at least 2 entries, got {a.size}")
    da = a - a.mean()
    db = b - b.mean()
    sa = float(da @ da)
    sb = float(db @ db)
    if sa / a.size < DEGENERATE_EPS or sb / b.size < DEGENERATE_EPS:
        return 0.0, True
    r = float(da @ db) / float(np.sqrt(sa * sb))
    return min(1.0, max(-1.0, r)), False


def pearson(a, b) -> float:
    return pearson_flagged(a, b)[0]


def cosine_flagged(a: Sequence[float], b: Sequence[float]) -> tuple[float, bool]:
    """Cosine similarity and a degeneracy flag (norm below 1e-12 reports 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"cosine needs equal-length vectors, got {a.shape} and {b.shape}")
    na = float(a @ a)
    nb = float(b @ b)
    if np.sqrt(na) <= DEGENERATE_EPS or np.sqrt(nb) <= DEGENERATE_EPS:
        return 0.0, True
    c = float(a @ b) / float(np.sqrt(na * nb))
    return min(1.0, max(-1.0, c)), False


def cosine(a, b) -> float:
    return cosine_flagged(a, b)[0]


def group_difference(fncs, labels) -> np.ndarray:
    """Entrywise mean over class-0 matrices minus mean over class-1 matrices."""
    mats = np.asarray(fncs, dtype=np.float64)
    labels = np.asarray(labels)
    if mats.ndim != 3:
        raise ContractError(f"expected stacked matrices [S,n,n], got {mats.shape}")
    hc = mats[labels == 0]
    sz = mats[labels == 1]
    if len(hc) == 0 or len(sz) == 0:
        raise ContractError("group difference needs at least one subject of each class")
    return hc.mean(axis=0) - sz.mean(axis=0)


@dataclass(frozen=True)
class DomainPartition:
    """Named contiguous index blocks covering a matrix order."""

    blocks: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        names = [b[0] for b in self.blocks]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate domain names in partition: {names}")
        expected = 0
        for name, start, length in self.blocks:
            if start != expected or length < 1:
                raise ContractError(f"domain {name!r} breaks contiguity at index {start}")
            expected = start + length
        if expected == 0:
            raise ContractError("empty domain partition")

    @property
    def order(self) -> int:
        name, start, length = self.blocks[-1]
        return start + length

    def to_manifest(self) -> list[dict]:
        return [{"name": n, "start": s, "len": l} for n, s, l in self.blocks]

    @classmethod
    def from_manifest(cls, entries: Sequence[dict]) -> "DomainPartition":
        return cls(tuple((e["name"], int(e["start"]), int(e["len"])) for e in entries))


def default_partition(n: int) -> DomainPartition:
    """The 7-domain desk partition for order 16; one catch-all block otherwise."""
    if n == 16:
        sizes = (("SC", 2), ("AUD", 2), ("SM", 2), ("VS", 2), ("CC", 3), ("DM", 3), ("CB", 2))
        blocks = []
        start = 0
        for name, length in sizes:
            blocks.append((name, start, length))
            start += length
        return DomainPartition(tuple(blocks))
    return DomainPartition((("ALL", 0, n),))


def _block_entries(mat: np.ndarray, a: tuple[str, int, int], b: tuple[str, int, int],
                   same_block: bool) -> np.ndarray:
    _, sa, la = a
    _, sb, lb = b
    sub = mat[sa:sa + la, sb:sb + lb]
    if same_block:
        r, c = np.triu_indices(la, k=1)
        return sub[r, c]
    return sub.reshape(-1)


def block_similarity(diff_gen: np.ndarray, diff_real: np.ndarray,
                     part: DomainPartition) -> dict[str, dict]:
    """Pearson between the two matrices restricted to each unordered domain pair.

    Same-domain pairs use the sub-block's upper triangle; pairs with fewer
    than 2 entries (or constant entries) are flagged degenerate.
    """
    dg = np.asarray(diff_gen, dtype=np.float64)
    dr = np.asarray(diff_real, dtype=np.float64)
    if dg.shape != dr.shape or dg.shape[0] != part.order:
        raise ContractError(
            f"partition order {part.order} does not match matrices {dg.shape} / {dr.shape}"
        )
    table: dict[str, dict] = {}
    for i, pa in enumerate(part.blocks):
        for j in range(i, len(part.blocks)):
            pb = part.blocks[j]
            key = "|".join(sorted((pa[0], pb[0])))
            va = _block_entries(dg, pa, pb, same_block=i == j)
            vb = _block_entries(dr, pa, pb, same_block=i == j)
            if va.size < 2:
                table[key] = {"pearson": 0.0, "degenerate": True}
                continue
            r, degenerate = pearson_flagged(va, vb)
            table[key] = {"pearson": r, "degenerate": degenerate}
    return table


@dataclass
class EvalReport:
    """Everything the evaluation stage measures, JSON round-trippable."""

    subjects: dict[str, dict]
    mean_pearson: float
    mean_cosine: float
    group_diff_pearson: float
    group_diff_cosine: float
    group_diff_pearson_degenerate: bool
    group_diff_cosine_degenerate: bool
    block_table: dict[str, dict]
    group_diff_generated: list[list[float]]
    group_diff_real: list[list[float]]
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "subjects": self.subjects,
            "mean_pearson": self.mean_pearson,
            "mean_cosine": self.mean_cosine,
            "group_diff_pearson": self.group_diff_pearson,
            "group_diff_cosine": self.group_diff_cosine,
            "group_diff_pearson_degenerate": self.group_diff_pearson_degenerate,
            "group_diff_cosine_degenerate": self.group_diff_cosine_degenerate,
            "block_table": self.block_table,
            "group_diff_generated": self.group_diff_generated,
            "group_diff_real": self.group_diff_real,
            "config": self.config,
            "seeds": self.seeds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate(genfn: Callable, records: Sequence, ids: Sequence[str],
             partition: DomainPartition, batch_size: int = 32,
             config_echo: dict | None = None, seeds: dict | None = None) -> EvalReport:
    """Generate matrices for the held-out ids (true class as condition) and
    score them against the real ones.

    `genfn` maps a list of subject records to stacked matrices [B,n,n];
    subjects are processed in sorted-id order.
    """
    if not ids:
        raise ContractError("evaluate needs a non-empty held-out split")
    by_id = {r.id: r for r in records}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ContractError(f"unknown subject ids in split: {missing[:3]}")
    ordered = sorted(ids)
    recs = [by_id[i] for i in ordered]

    generated = []
    for lo in range(0, len(recs), batch_size):
        generated.append(np.asarray(genfn(recs[lo:lo + batch_size])))
    gen_mats = np.concatenate(generated, axis=0)
    real_mats = np.stack([r.fnc for r in recs])
    labels = np.array([r.label for r in recs])

    subjects = {}
    pearsons, cosines = [], []
    for idx, rec in enumerate(recs):
        tg = triangle(gen_mats[idx])
        tr = triangle(real_mats[idx])
        r, r_deg = pearson_flagged(tr, tg)
        c, c_deg = cosine_flagged(tr, tg)
        subjects[rec.id] = {
            "pearson": r, "cosine": c,
            "pearson_degenerate": r_deg, "cosine_degenerate": c_deg,
        }
        pearsons.append(r)
        cosines.append(c)

    diff_gen = group_difference(gen_mats, labels)
    diff_real = group_difference(real_mats, labels)
    gd_p, gd_p_deg = pearson_flagged(triangle(diff_real), triangle(diff_gen))
    gd_c, gd_c_deg = cosine_flagged(triangle(diff_real), triangle(diff_gen))

    return EvalReport(
        subjects=subjects,
        mean_pearson=float(np.mean(pearsons)),
        mean_cosine=float(np.mean(cosines)),
        group_diff_pearson=gd_p,
        group_diff_cosine=gd_c,
        group_diff_pearson_degenerate=gd_p_deg,
        group_diff_cosine_degenerate=gd_c_deg,
        block_table=block_similarity(diff_gen, diff_real, partition),
        group_diff_generated=[[float(v) for v in row] for row in diff_gen],
        group_diff_real=[[float(v) for v in row] for row in diff_real],
        config=config_echo or {},
        seeds=seeds or {},
    )


def write_matrix_csv(mat: np.ndarray, path) -> None:
    """n rows of comma-separated decimals, 9 significant digits."""
    m = np.asarray(mat)
    lines = [",".join(f"{v:.9g}" for v in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n")
