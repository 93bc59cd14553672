"""ViT building blocks: patch extraction, token embedding, attention, post-norm blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

LAYERNORM_EPS = 1e-5
INIT_STD = 0.02

NUM_CLASSES = 2  # labels are 0 (control) / 1 (patient) throughout


@dataclass(frozen=True)
class PatchConfig:
    """Shape contract for a ViT stack over a 3D volume or 2D matrix."""

    input_dims: tuple[int, ...]
    patch_size: int
    d_model: int
    n_heads: int
    n_blocks: int
    ffn_hidden: int

    def __post_init__(self):
        for axis, dim in enumerate(self.input_dims):
            if dim % self.patch_size != 0:
                raise ConfigError(
                    f"input axis {axis} (size {dim}) not divisible by patch size {self.patch_size}"
                )
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"n_heads {self.n_heads} must divide d_model {self.d_model}")

    @property
    def n_tokens(self) -> int:
        return math.prod(d // self.patch_size for d in self.input_dims)

    @property
    def patch_numel(self) -> int:
        return self.patch_size ** len(self.input_dims)


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std, the usual ViT init."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def patchify3d(vol, patch: int) -> Tensor:
    """Cut a volume [B,D,H,W] (or [D,H,W]) into flattened cubes [B,T,p^3].

    Patch order is raster over the patch grid (z-major, then y, then x);
    voxels within each cube are row-major flattened the same way.
    """
    v = T.as_tensor(vol)
    single = v.ndim == 3
    if single:
        v = v.reshape((1,) + v.shape)
    if v.ndim != 4:
        raise ConfigError(f"patchify3d expects [B,D,H,W] or [D,H,W], got {v.shape}")
    b, d, h, w = v.shape
    for axis, dim in zip("DHW", (d, h, w)):
        if dim % patch != 0:
            raise ConfigError(f"volume axis {axis} (size {dim}) not divisible by patch size {patch}")
    gd, gh, gw = d // patch, h // patch, w // patch
    x = v.reshape(b, gd, patch, gh, patch, gw, patch)
    x = T.transpose(x, (0, 1, 3, 5, 2, 4, 6))
    out = x.reshape(b, gd * gh * gw, patch**3)
    return out.reshape(out.shape[1:]) if single else out


def unpatchify3d(patches, dims: tuple[int, int, int], patch: int) -> Tensor:
    """Inverse of patchify3d."""
    p = T.as_tensor(patches)
    single = p.ndim == 2
    if single:
        p = p.reshape((1,) + p.shape)
    b = p.shape[0]
    d, h, w = dims
    gd, gh, gw = d // patch, h // patch, w // patch
    x = p.reshape(b, gd, gh, gw, patch, patch, patch)
    x = T.transpose(x, (0, 1, 4, 2, 5, 3, 6))
    out = x.reshape(b, d, h, w)
    return out.reshape(dims) if single else out


def patchify2d(mat, patch: int) -> Tensor:
    """Cut a matrix [B,n,n] (or [n,n]) into flattened tiles [B,T',p^2], raster order.

    Matrices whose order is not a multiple of the patch size are zero-padded
    on the bottom/right to the next multiple.
    """
    m = T.as_tensor(mat)
    single = m.ndim == 2
    if single:
        m = m.reshape((1,) + m.shape)
    b, n, n2 = m.shape
    target = padded_order(n, patch)
    if target != n:
        m = T.pad(m, ((0, 0), (0, target - n), (0, target - n)))
    g = target // patch
    x = m.reshape(b, g, patch, g, patch)
    x = T.transpose(x, (0, 1, 3, 2, 4))
    out = x.reshape(b, g * g, patch * patch)
    return out.reshape(out.shape[1:]) if single else out


def unpatchify2d(patches, order: int, patch: int) -> Tensor:
    """Inverse of patchify2d; returns the padded matrix [B,M,M]."""
    p = T.as_tensor(patches)
    single = p.ndim == 2
    if single:
        p = p.reshape((1,) + p.shape)
    b, t, _ = p.shape
    g = int(round(math.sqrt(t)))
    m = g * patch
    x = p.reshape(b, g, g, patch, patch)
    x = T.transpose(x, (0, 1, 3, 2, 4))
    out = x.reshape(b, m, m)
    return out.reshape(m, m) if single else out


def padded_order(n: int, patch: int) -> int:
    return ((n + patch - 1) // patch) * patch


class Linear:
    """y = x @ w (+ b), trunc-normal weights, zero bias."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.w = Tensor(trunc_normal(rng, (d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        return out + self.b if self.b is not None else out

    def named_params(self) -> dict[str, Tensor]:
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out


class LayerNorm:
    def __init__(self, d: int, eps: float = LAYERNORM_EPS):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, self.eps)

    def named_params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}


class TokenEmbedder:
    """patches @ w_proj + position embedding (+ class embedding when conditioned)."""

    def __init__(self, patch_numel: int, d_model: int, max_tokens: int,
                 class_conditioning: bool, rng: np.random.Generator):
        self.proj = Tensor(trunc_normal(rng, (patch_numel, d_model)), requires_grad=True)
        self.pos = Tensor(trunc_normal(rng, (max_tokens, d_model)), requires_grad=True)
        self.class_table = (
            Tensor(trunc_normal(rng, (NUM_CLASSES, d_model)), requires_grad=True)
            if class_conditioning else None
        )
        self.max_tokens = max_tokens

    def __call__(self, patches: Tensor, labels: np.ndarray | None) -> Tensor:
        t = patches.shape[-2]
        if t > self.max_tokens:
            raise ConfigError(f"{t} tokens exceed the position table ({self.max_tokens} rows)")
        x = patches @ self.proj
        x = x + (self.pos[:t] if t < self.max_tokens else self.pos)
        if self.class_table is not None:
            cls = T.one_hot(labels, NUM_CLASSES) @ self.class_table  # [B, d]
            x = x + cls.reshape(cls.shape[0], 1, cls.shape[1])
        return x

    def named_params(self) -> dict[str, Tensor]:
        out = {"proj": self.proj, "pos": self.pos}
        if self.class_table is not None:
            out["class_table"] = self.class_table
        return out


class SelfAttention:
    """Multi-head scaled dot-product attention, shape-preserving on [B,T,d].

    Q, K, V projections run as one fused matmul; heads are cut out of the
    joint tensor after a single reshape."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads != 0:
            raise ConfigError(f"n_heads {n_heads} must divide d_model {d_model}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wqkv = Linear(d_model, 3 * d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        joint = self.wqkv(x).reshape(b, t, 3, self.n_heads, self.d_head)
        joint = T.transpose(joint, (2, 0, 3, 1, 4))  # [3, B, heads, T, d_head]
        q, k, v = joint[0], joint[1], joint[2]
        scores = (q @ T.swap_last2(k)) * (1.0 / math.sqrt(self.d_head))
        attn = T.softmax(scores, axis=-1)
        out = T.transpose(attn @ v, (0, 2, 1, 3)).reshape(b, t, d)
        return self.wo(out)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for label, lin in (("wqkv", self.wqkv), ("wo", self.wo)):
            for k, p in lin.named_params().items():
                out[f"{label}.{k}"] = p
        return out


class FeedForward:
    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        self.lin1 = Linear(d_model, hidden, rng)
        self.lin2 = Linear(hidden, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self.lin1(x).gelu())

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for label, lin in (("lin1", self.lin1), ("lin2", self.lin2)):
            for k, p in lin.named_params().items():
                out[f"{label}.{k}"] = p
        return out


class TransformerBlock:
    """Post-norm block: LayerNorm after each residual add."""

    def __init__(self, d_model: int, n_heads: int, ffn_hidden: int, rng: np.random.Generator):
        self.attn = SelfAttention(d_model, n_heads, rng)
        self.ffn = FeedForward(d_model, ffn_hidden, rng)
        self.ln1 = LayerNorm(d_model)
        self.ln2 = LayerNorm(d_model)

    def __call__(self, x: Tensor) -> Tensor:
        z = self.ln1(self.attn(x) + x)
        return self.ln2(z + self.ffn(z))

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for label, part in (("attn", self.attn), ("ffn", self.ffn), ("ln1", self.ln1), ("ln2", self.ln2)):
            for k, p in part.named_params().items():
                out[f"{label}.{k}"] = p
        return out


class ViTEncoder:
    """Token embedding followed by a stack of post-norm transformer blocks."""

    def __init__(self, patch_numel: int, d_model: int, n_heads: int, n_blocks: int,
                 ffn_hidden: int, max_tokens: int, class_conditioning: bool,
                 rng: np.random.Generator):
        self.embedder = TokenEmbedder(patch_numel, d_model, max_tokens, class_conditioning, rng)
        self.blocks = [TransformerBlock(d_model, n_heads, ffn_hidden, rng) for _ in range(n_blocks)]

    def __call__(self, patches: Tensor, labels: np.ndarray | None) -> Tensor:
        x = self.embedder(patches, labels)
        for block in self.blocks:
            x = block(x)
        return x

    def collect(self, patches: Tensor, labels: np.ndarray | None) -> list[Tensor]:
        """Per-block activations, one entry per transformer block."""
        x = self.embedder(patches, labels)
        acts = []
        for block in self.blocks:
            x = block(x)
            acts.append(x)
        return acts

    def named_params(self) -> dict[str, Tensor]:
        out = {f"embed.{k}": p for k, p in self.embedder.named_params().items()}
        for i, block in enumerate(self.blocks):
            for k, p in block.named_params().items():
                out[f"block{i}.{k}"] = p
        return out
