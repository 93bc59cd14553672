"""ViT discriminator for real/generated connectivity matrices, and the frozen
feature network behind the perceptual loss."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Linear, PatchConfig, ViTEncoder, padded_order, patchify2d
from .tensor import Tensor


def _batched(fnc) -> Tensor:
    m = T.as_tensor(fnc)
    return m.reshape((1,) + m.shape) if m.ndim == 2 else m


class Discriminator:
    """Patch-embeds a matrix, runs transformer blocks, mean-pools, scores one logit."""

    def __init__(self, fnc_order: int, patch: int, d_model: int, n_heads: int,
                 n_blocks: int, ffn_hidden: int, class_conditioning: bool,
                 rng: np.random.Generator):
        self.fnc_order = fnc_order
        self.patch = patch
        padded = padded_order(fnc_order, patch)
        cfg = PatchConfig(input_dims=(padded, padded), patch_size=patch, d_model=d_model,
                          n_heads=n_heads, n_blocks=n_blocks, ffn_hidden=ffn_hidden)
        self.class_conditioning = class_conditioning
        self.encoder = ViTEncoder(cfg.patch_numel, d_model, n_heads, n_blocks, ffn_hidden,
                                  cfg.n_tokens, class_conditioning, rng)
        self.head = Linear(d_model, 1, rng)

    def forward(self, fnc, labels: np.ndarray | None) -> Tensor:
        """Matrices [B,n,n] to pre-sigmoid logits [B]."""
        patches = patchify2d(_batched(fnc), self.patch)
        tokens = self.encoder(patches, labels if self.class_conditioning else None)
        logits = self.head(tokens.mean(axis=1))
        return logits.reshape(logits.shape[0])

    def discriminate(self, fnc: np.ndarray, label: int) -> float:
        with T.no_grad():
            return float(self.forward(np.asarray(fnc)[None], np.array([label])).data[0])

    def named_params(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": p for k, p in self.encoder.named_params().items()}
        for k, p in self.head.named_params().items():
            out[f"head.{k}"] = p
        return out


class FeatureExtractor:
    """Frozen, seeded ViT used only to read per-block feature maps.

    Stands in for a pretrained perceptual network; `assign_params` accepts
    externally trained weights in the package's own checkpoint layout.
    No optimizer ever sees these parameters.
    """

    def __init__(self, fnc_order: int, patch: int, d_model: int, n_heads: int,
                 n_blocks: int, ffn_hidden: int, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.fnc_order = fnc_order
        self.patch = patch
        padded = padded_order(fnc_order, patch)
        cfg = PatchConfig(input_dims=(padded, padded), patch_size=patch, d_model=d_model,
                          n_heads=n_heads, n_blocks=n_blocks, ffn_hidden=ffn_hidden)
        self.encoder = ViTEncoder(cfg.patch_numel, d_model, n_heads, n_blocks, ffn_hidden,
                                  cfg.n_tokens, class_conditioning=False, rng=rng)
        for p in self.encoder.named_params().values():
            p.requires_grad = False

    def extract_features(self, fnc) -> list[Tensor]:
        """All per-block token activations for one batch of matrices."""
        patches = patchify2d(_batched(fnc), self.patch)
        return self.encoder.collect(patches, None)

    def named_params(self) -> dict[str, Tensor]:
        return {f"encoder.{k}": p for k, p in self.encoder.named_params().items()}

    def assign_params(self, values: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        for name, arr in values.items():
            if name not in params:
                raise KeyError(f"unknown feature-network parameter {name!r}")
            if params[name].shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: have {params[name].shape}, got {arr.shape}"
                )
            params[name].data = np.asarray(arr, dtype=np.float64)
