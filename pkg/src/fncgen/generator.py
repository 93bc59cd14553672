"""Generator: 3D volume + class label -> connectivity matrix, via patch tokens,
transformer blocks, per-token fragment heads, and fragment stitching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .layers import Linear, PatchConfig, ViTEncoder, patchify3d, trunc_normal
from .tensor import Tensor


@dataclass(frozen=True)
class FragmentPlan:
    """How K square fragments tile (and overshoot) an n-by-n matrix."""

    n: int
    f: int

    def __post_init__(self):
        if self.n < 1 or self.f < 1:
            raise ConfigError(f"fragment plan needs n >= 1 and f >= 1, got n={self.n}, f={self.f}")

    @property
    def grid(self) -> int:
        return -(-self.n // self.f)  # ceil

    @property
    def count(self) -> int:
        return self.grid**2

    @property
    def padded(self) -> int:
        return self.grid * self.f


def stitch(fragments, plan: FragmentPlan) -> Tensor:
    """Tile fragments row-major onto the padded grid, crop to n, symmetrize,
    and overwrite the diagonal with 1.

    Fragment k covers rows [f*(k // g), +f) and cols [f*(k % g), +f) of the
    padded matrix before symmetrization.
    """
    frags = T.as_tensor(fragments)
    single = frags.ndim == 2
    if single:
        frags = frags.reshape((1,) + frags.shape)
    b, k, ff = frags.shape
    g, f, n = plan.grid, plan.f, plan.n
    if k != plan.count:
        raise ContractError(f"expected {plan.count} fragments for plan (n={n}, f={f}), got {k}")
    x = frags.reshape(b, g, g, f, f)
    x = T.transpose(x, (0, 1, 3, 2, 4))
    full = x.reshape(b, g * f, g * f)
    if plan.padded != n:
        full = full[:, :n, :n]
    sym = (full + T.swap_last2(full)) * 0.5
    off_mask = Tensor(1.0 - np.eye(n))
    eye = Tensor(np.eye(n))
    out = sym * off_mask + eye
    return out.reshape(n, n) if single else out


class Generator:
    """Conditional volume-to-connectivity translator; deterministic, no noise input."""

    def __init__(self, vol_dims: tuple[int, int, int], patch: int, d_model: int,
                 n_heads: int, n_blocks: int, ffn_hidden: int, fnc_order: int,
                 fragment_side: int, class_conditioning: bool, rng: np.random.Generator):
        cfg = PatchConfig(input_dims=tuple(vol_dims), patch_size=patch, d_model=d_model,
                          n_heads=n_heads, n_blocks=n_blocks, ffn_hidden=ffn_hidden)
        self.vol_dims = cfg.input_dims
        self.patch = patch
        self.plan = FragmentPlan(fnc_order, fragment_side)
        self.n_tokens = cfg.n_tokens
        self.class_conditioning = class_conditioning
        self.encoder = ViTEncoder(cfg.patch_numel, d_model, n_heads, n_blocks, ffn_hidden,
                                  self.n_tokens, class_conditioning, rng)
        k = self.plan.count
        # identity resampling when token and fragment counts agree, so that the
        # map starts as a pass-through; random projection otherwise
        resample = np.eye(k) if k == self.n_tokens else trunc_normal(rng, (k, self.n_tokens))
        self.resample = Tensor(resample, requires_grad=True)
        self.head1 = Linear(d_model, ffn_hidden, rng)
        self.head2 = Linear(ffn_hidden, fragment_side**2, rng)

    def resample_tokens(self, tokens: Tensor) -> Tensor:
        """Learned linear map across the token axis: [B,T,d] -> [B,K,d]."""
        return self.resample @ tokens

    def fragment_heads(self, tokens: Tensor) -> Tensor:
        """Shared MLP from each token to one tanh-bounded f*f fragment."""
        return self.head2(self.head1(tokens).gelu()).tanh()

    def forward_patches(self, patches, labels: np.ndarray | None) -> Tensor:
        """Full pipeline from pre-cut volume patches [B,T,p^3]."""
        tokens = self.encoder(T.as_tensor(patches), labels if self.class_conditioning else None)
        fragments = self.fragment_heads(self.resample_tokens(tokens))
        return stitch(fragments, self.plan)

    def forward(self, vols, labels: np.ndarray | None) -> Tensor:
        """Volumes [B,D,H,W] and labels [B] to connectivity matrices [B,n,n]."""
        return self.forward_patches(patchify3d(T.as_tensor(vols), self.patch), labels)

    def generate(self, vol: np.ndarray, label: int) -> np.ndarray:
        """Single-subject convenience: plain numpy in, plain numpy out."""
        with T.no_grad():
            out = self.forward(np.asarray(vol)[None], np.array([label]))
        return out.data[0]

    def named_params(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": p for k, p in self.encoder.named_params().items()}
        out["resample"] = self.resample
        for label, lin in (("head1", self.head1), ("head2", self.head2)):
            for k, p in lin.named_params().items():
                out[f"{label}.{k}"] = p
        return out
