"""Synthetic cohort with a known structure-to-connectivity mapping, the on-disk
dataset layout, and stratified cross-validation splits.

Volumes are sums of Gaussian blobs whose amplitudes come from a latent vector
z and whose centers shift with the class label; connectivity matrices come
from a low-rank symmetric map of the same z. Both modalities therefore share
a learnable cross-modal relationship with a controllable group effect.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .metrics import DomainPartition, default_partition

CLASS_NAMES = ("HC", "SZ")
FORMAT_VERSION = 1
VOL_MAGIC = b"FNCV"
FNC_MAGIC = b"FNCM"

# seed-stream tags: (seed, 0) cohort parameters, (seed, 1, i) subject i,
# (seed, 2) Monte-Carlo oracle
_PARAM_STREAM, _SUBJECT_STREAM, _ORACLE_STREAM = 0, 1, 2

_CENTER_SHIFT_SCALE = 0.08  # class shift of blob centers, fraction of axis


@dataclass(frozen=True)
class CohortConfig:
    n_subjects: int = 400
    class_balance: float = 0.5
    volume_dims: tuple[int, int, int] = (32, 32, 32)
    fnc_order: int = 16
    latent_dim: int = 8
    sigma_vol: float = 0.02
    sigma_fnc: float = 0.05
    class_effect: float = 0.6
    seed: int = 7

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ConfigError(f"n_subjects must be >= 2, got {self.n_subjects}")
        if not 0.0 < self.class_balance < 1.0:
            raise ConfigError(f"class_balance must be in (0,1), got {self.class_balance}")
        if self.sigma_vol < 0 or self.sigma_fnc < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.latent_dim > self.fnc_order:
            raise ConfigError(
                f"latent_dim {self.latent_dim} cannot exceed fnc_order {self.fnc_order}"
            )

    @property
    def n_hc(self) -> int:
        return int(round(self.n_subjects * self.class_balance))


@dataclass
class SubjectRecord:
    id: str
    label: int  # 0 = HC, 1 = SZ
    volume: np.ndarray
    fnc: np.ndarray

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.label]


@dataclass
class GroundTruth:
    """Generative parameters; enough to recompute the oracle exactly."""

    seed: int
    volume_dims: tuple[int, int, int]
    fnc_order: int
    latent_dim: int
    sigma_vol: float
    sigma_fnc: float
    class_effect: float
    basis: np.ndarray        # [n, d_z] orthonormal columns
    base_weights: np.ndarray  # [d_z]
    mixing: np.ndarray       # [d_z, d_z]
    class_shift: np.ndarray  # [d_z]
    blob_centers: np.ndarray  # [d_z, 3], fraction coords
    blob_widths: np.ndarray  # [d_z]
    blob_dirs: np.ndarray    # [d_z, 3], unit vectors

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "volume_dims": list(self.volume_dims),
            "fnc_order": self.fnc_order,
            "latent_dim": self.latent_dim,
            "sigma_vol": self.sigma_vol,
            "sigma_fnc": self.sigma_fnc,
            "class_effect": self.class_effect,
            "basis": self.basis.tolist(),
            "base_weights": self.base_weights.tolist(),
            "mixing": self.mixing.tolist(),
            "class_shift": self.class_shift.tolist(),
            "blob_centers": self.blob_centers.tolist(),
            "blob_widths": self.blob_widths.tolist(),
            "blob_dirs": self.blob_dirs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            seed=d["seed"],
            volume_dims=tuple(d["volume_dims"]),
            fnc_order=d["fnc_order"],
            latent_dim=d["latent_dim"],
            sigma_vol=d["sigma_vol"],
            sigma_fnc=d["sigma_fnc"],
            class_effect=d["class_effect"],
            basis=np.array(d["basis"]),
            base_weights=np.array(d["base_weights"]),
            mixing=np.array(d["mixing"]),
            class_shift=np.array(d["class_shift"]),
            blob_centers=np.array(d["blob_centers"]),
            blob_widths=np.array(d["blob_widths"]),
            blob_dirs=np.array(d["blob_dirs"]),
        )


def _draw_ground_truth(cfg: CohortConfig) -> GroundTruth:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _PARAM_STREAM)))
    dz, n = cfg.latent_dim, cfg.fnc_order
    basis, _ = np.linalg.qr(rng.standard_normal((n, dz)))
    dirs = rng.standard_normal((dz, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return GroundTruth(
        seed=cfg.seed,
        volume_dims=cfg.volume_dims,
        fnc_order=n,
        latent_dim=dz,
        sigma_vol=cfg.sigma_vol,
        sigma_fnc=cfg.sigma_fnc,
        class_effect=cfg.class_effect,
        basis=basis,
        base_weights=rng.uniform(-1.2, 1.2, dz),
        mixing=rng.normal(0.0, 0.9 / np.sqrt(dz), (dz, dz)),
        class_shift=rng.standard_normal(dz),
        blob_centers=rng.uniform(0.25, 0.75, (dz, 3)),
        blob_widths=rng.uniform(0.10, 0.20, dz),
        blob_dirs=dirs,
    )


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _volume_from_latent(gt: GroundTruth, z: np.ndarray, label: int,
                        rng: np.random.Generator) -> np.ndarray:
    dims = gt.volume_dims
    amps = _softplus(z)
    coords = [(np.arange(d) + 0.5) / d for d in dims]
    fieldv = np.zeros(dims)
    for k in range(gt.latent_dim):
        center = gt.blob_centers[k] + gt.class_effect * label * _CENTER_SHIFT_SCALE * gt.blob_dirs[k]
        width2 = 2.0 * gt.blob_widths[k] ** 2
        r2 = (
            ((coords[0] - center[0]) ** 2)[:, None, None]
            + ((coords[1] - center[1]) ** 2)[None, :, None]
            + ((coords[2] - center[2]) ** 2)[None, None, :]
        )
        fieldv += amps[k] * np.exp(-r2 / width2)
    fieldv /= fieldv.max()
    fieldv = fieldv + rng.normal(0.0, gt.sigma_vol, dims) if gt.sigma_vol > 0 else fieldv
    return np.clip(fieldv, 0.0, 1.0)


def _fnc_from_latent(gt: GroundTruth, z: np.ndarray, label: int,
                     rng: np.random.Generator) -> np.ndarray:
    w = gt.base_weights + gt.mixing @ z + gt.class_effect * label * gt.class_shift
    s = (gt.basis * w) @ gt.basis.T
    e = rng.normal(0.0, gt.sigma_fnc, (gt.fnc_order, gt.fnc_order)) if gt.sigma_fnc > 0 \
        else np.zeros((gt.fnc_order, gt.fnc_order))
    noise = np.triu(e, 1)
    y = np.tanh(s + noise + noise.T)
    y = (y + y.T) / 2.0
    np.fill_diagonal(y, 1.0)
    return y


def make_subject(gt: GroundTruth, index: int, label: int) -> SubjectRecord:
    """Deterministic regardless of generation order: subject i uses seed (seed, 1, i)."""
    rng = np.random.default_rng(np.random.SeedSequence((gt.seed, _SUBJECT_STREAM, index)))
    z = rng.standard_normal(gt.latent_dim)
    volume = _volume_from_latent(gt, z, label, rng)
    fnc = _fnc_from_latent(gt, z, label, rng)
    return SubjectRecord(id=f"sub-{index:04d}", label=label, volume=volume, fnc=fnc)


def make_cohort(cfg: CohortConfig) -> tuple[list[SubjectRecord], GroundTruth]:
    gt = _draw_ground_truth(cfg)
    n_hc = cfg.n_hc
    return [make_subject(gt, i, 0 if i < n_hc else 1) for i in range(cfg.n_subjects)], gt


def ground_truth_group_diff(gt: GroundTruth, n_mc: int, seed: int) -> np.ndarray:
    """Monte-Carlo estimate of E[fnc | HC] - E[fnc | SZ]; symmetric, zero diagonal."""
    if n_mc < 1000:
        raise ContractError(f"Monte-Carlo oracle needs n_mc >= 1000, got {n_mc}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, _ORACLE_STREAM)))
    n = gt.fnc_order

    def class_mean(label: int) -> np.ndarray:
        z = rng.standard_normal((n_mc, gt.latent_dim))
        w = gt.base_weights + z @ gt.mixing.T + gt.class_effect * label * gt.class_shift
        s = np.einsum("ik,mk,jk->mij", gt.basis, w, gt.basis, optimize=True)
        e = rng.normal(0.0, gt.sigma_fnc, (n_mc, n, n)) if gt.sigma_fnc > 0 \
            else np.zeros((n_mc, n, n))
        noise = np.triu(e, 1)
        y = np.tanh(s + noise + noise.transpose(0, 2, 1))
        return y.mean(axis=0)

    diff = class_mean(0) - class_mean(1)
    diff = (diff + diff.T) / 2.0
    np.fill_diagonal(diff, 0.0)
    return diff


# ---------------------------------------------------------------------------
# on-disk formats

def write_vol(path, volume: np.ndarray) -> None:
    v = np.asarray(volume)
    with open(path, "wb") as fh:
        fh.write(VOL_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<III", *v.shape))
        fh.write(v.astype("<f4").tobytes())


def read_vol(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 20:
        raise FormatError(f"{path}: truncated volume header")
    if blob[:4] != VOL_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {VOL_MAGIC!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported volume format version {version}")
    dims = struct.unpack("<III", blob[8:20])
    expected = 20 + 4 * int(np.prod(dims))
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for dims {dims}, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=20)
    return data.astype(np.float64).reshape(dims)


def write_fnc(path, fnc: np.ndarray) -> None:
    m = np.asarray(fnc)
    with open(path, "wb") as fh:
        fh.write(FNC_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", m.shape[0]))
        fh.write(m.astype("<f4").tobytes())


def read_fnc(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated matrix header")
    if blob[:4] != FNC_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {FNC_MAGIC!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported matrix format version {version}")
    (order,) = struct.unpack("<I", blob[8:12])
    expected = 12 + 4 * order * order
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for order {order}, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=12)
    return data.astype(np.float64).reshape(order, order)


@dataclass
class Dataset:
    records: list[SubjectRecord]
    volume_dims: tuple[int, int, int]
    fnc_order: int
    partition: DomainPartition
    ground_truth: GroundTruth | None = None
    manifest: dict = field(default_factory=dict)

    def by_id(self) -> dict[str, SubjectRecord]:
        return {r.id: r for r in self.records}


def write_dataset(out_dir, records: list[SubjectRecord],
                  partition: DomainPartition | None = None,
                  ground_truth: GroundTruth | None = None) -> None:
    out = Path(out_dir)
    (out / "subjects").mkdir(parents=True, exist_ok=True)
    dims = records[0].volume.shape
    order = records[0].fnc.shape[0]
    partition = partition or default_partition(order)
    manifest = {
        "format_version": FORMAT_VERSION,
        "n_subjects": len(records),
        "volume_dims": list(dims),
        "fnc_order": order,
        "class_names": list(CLASS_NAMES),
        "domain_partition": partition.to_manifest(),
        "subjects": [{"id": r.id, "class": r.class_name} for r in records],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for r in records:
        write_vol(out / "subjects" / f"{r.id}.vol", r.volume)
        write_fnc(out / "subjects" / f"{r.id}.fnc", r.fnc)
    if ground_truth is not None:
        (out / "ground_truth.json").write_text(
            json.dumps(ground_truth.to_dict(), indent=2, sort_keys=True) + "\n"
        )


def read_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in ("format_version", "n_subjects", "volume_dims", "fnc_order",
                "class_names", "domain_partition", "subjects"):
        if key not in manifest:
            raise FormatError(f"{manifest_path}: missing manifest key {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise FormatError(f"{manifest_path}: unsupported format version {manifest['format_version']}")
    if manifest["n_subjects"] != len(manifest["subjects"]):
        raise FormatError(
            f"{manifest_path}: n_subjects {manifest['n_subjects']} does not match "
            f"{len(manifest['subjects'])} listed subjects"
        )
    dims = tuple(manifest["volume_dims"])
    order = manifest["fnc_order"]
    class_index = {name: i for i, name in enumerate(manifest["class_names"])}
    records = []
    for entry in manifest["subjects"]:
        sid, cls = entry["id"], entry["class"]
        if cls not in class_index:
            raise FormatError(f"{manifest_path}: unknown class {cls!r} for subject {sid}")
        volume = read_vol(root / "subjects" / f"{sid}.vol")
        fnc = read_fnc(root / "subjects" / f"{sid}.fnc")
        if volume.shape != dims:
            raise FormatError(f"{sid}.vol: dims {volume.shape} do not match manifest {dims}")
        if fnc.shape[0] != order:
            raise FormatError(f"{sid}.fnc: order {fnc.shape[0]} does not match manifest {order}")
        records.append(SubjectRecord(id=sid, label=class_index[cls], volume=volume, fnc=fnc))
    ground_truth = None
    gt_path = root / "ground_truth.json"
    if gt_path.exists():
        ground_truth = GroundTruth.from_dict(json.loads(gt_path.read_text()))
    return Dataset(
        records=records,
        volume_dims=dims,
        fnc_order=order,
        partition=DomainPartition.from_manifest(manifest["domain_partition"]),
        ground_truth=ground_truth,
        manifest=manifest,
    )


# ---------------------------------------------------------------------------
# cross-validation splits

@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[tuple[str, ...], ...]

    def val_ids(self, fold: int) -> list[str]:
        return list(self.folds[fold])

    def train_ids(self, fold: int) -> list[str]:
        out: list[str] = []
        for i, ids in enumerate(self.folds):
            if i != fold:
                out.extend(ids)
        return out


def stratified_kfold(ids: list[str], labels: list[int], k: int, seed: int) -> FoldSplit:
    """Deterministic stratified split: per-fold class counts within 1 of even."""
    if k < 2:
        raise ConfigError(f"k-fold split needs k >= 2, got {k}")
    if k > len(ids):
        raise ConfigError(f"cannot split {len(ids)} subjects into {k} folds")
    if len(ids) != len(labels):
        raise ContractError(f"{len(ids)} ids vs {len(labels)} labels")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
    folds: list[list[str]] = [[] for _ in range(k)]
    start = 0
    for cls in sorted(set(labels)):
        members = [i for i, lab in zip(ids, labels) if lab == cls]
        order = rng.permutation(len(members))
        for j, idx in enumerate(order):
            folds[(start + j) % k].append(members[idx])
        start = (start + len(members)) % k
    return FoldSplit(tuple(tuple(sorted(f)) for f in folds))
