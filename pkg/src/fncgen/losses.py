"""Training objectives: adversarial pair, triangle MSE, frozen-feature
perceptual distance, correlation loss, and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .metrics import triangle_indices
from .tensor import Tensor

DEGENERATE_STD_PRODUCT = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights of the MSE, perceptual, and correlation terms in the total."""

    lambda1: float = 10.0
    lambda2: float = 0.5
    lambda3: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")


@dataclass(frozen=True)
class LossBreakdown:
    gan: float
    mse: float
    perceptual: float
    correlation: float
    total: float


def _as_batched_triangle(m) -> Tensor:
    """[n,n] or [B,n,n] matrices to [B, n(n-1)/2] upper-triangle rows."""
    t = T.as_tensor(m)
    if t.ndim == 2:
        t = t.reshape((1,) + t.shape)
    rows, cols = triangle_indices(t.shape[-1])
    return T.take_pairs(t, rows, cols)


def _check_orders(y, y_hat) -> None:
    ny = T.as_tensor(y).shape[-1]
    nh = T.as_tensor(y_hat).shape[-1]
    if ny != nh:
        raise ContractError(f"matrix orders differ: real {ny} vs generated {nh}")


def d_loss(logit_real, logit_fake) -> Tensor:
    """Binary cross-entropy with logits for the discriminator.

    -[log sigmoid(real) + log(1 - sigmoid(fake))], stabilized via softplus;
    means over any batch axis.
    """
    lr = T.as_tensor(logit_real)
    lf = T.as_tensor(logit_fake)
    return T.softplus(-lr).mean() + T.softplus(lf).mean()


def g_adv_loss(logit_fake) -> Tensor:
    """Non-saturating generator loss: -log sigmoid(fake)."""
    return T.softplus(-T.as_tensor(logit_fake)).mean()


def mse_loss(y, y_hat) -> Tensor:
    """Mean squared difference over the off-diagonal upper triangle."""
    _check_orders(y, y_hat)
    diff = _as_batched_triangle(y) - _as_batched_triangle(y_hat)
    return (diff * diff).mean()


def correlation_loss(y, y_hat) -> Tensor:
    """1 - Pearson(y, y_hat) over triangles, averaged across the batch.

    A pair whose std product falls below 1e-12 contributes exactly 1
    (treated as uncorrelated) and no gradient.
    """
    _check_orders(y, y_hat)
    ty = _as_batched_triangle(y)
    th = _as_batched_triangle(y_hat)
    dy = ty - ty.mean(axis=-1, keepdims=True)
    dh = th - th.mean(axis=-1, keepdims=True)
    cov = (dy * dh).mean(axis=-1)
    vy = (dy * dy).mean(axis=-1)
    vh = (dh * dh).mean(axis=-1)
    denom = (vy * vh).sqrt()
    ok = Tensor((denom.data >= DEGENERATE_STD_PRODUCT).astype(np.float64))
    r = (cov / T.clip_min(denom, DEGENERATE_STD_PRODUCT)) * ok
    return (1.0 - r).mean()


def perceptual_loss(y, y_hat, feature_net, blocks, real_features=None) -> Tensor:
    """Normalized squared feature distance, averaged over the chosen blocks.

    `blocks` holds 1-based transformer block indices of the frozen feature
    network; per block the distance is the mean over all token activation
    entries (the token-grid reading of a per-feature-map normalization).
    Precomputed `real_features` (from `feature_net.extract_features(y)`)
    skip the constant-side forward pass.
    """
    _check_orders(y, y_hat)
    if not blocks:
        raise ConfigError("perceptual loss needs at least one feature block")
    n_blocks = len(feature_net.encoder.blocks)
    for b in blocks:
        if not 1 <= b <= n_blocks:
            raise ConfigError(f"feature block {b} out of range 1..{n_blocks}")
    if real_features is None:
        with T.no_grad():
            real_features = feature_net.extract_features(y)
    feats_hat = feature_net.extract_features(y_hat)
    total = None
    for b in blocks:
        diff = T.as_tensor(real_features[b - 1]) - feats_hat[b - 1]
        term = (diff * diff).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(blocks))


def total_g_loss(gan, mse, perceptual, correlation, weights: LossWeights) -> Tensor:
    """Weighted generator objective: gan + l1*mse + l2*perceptual + l3*corr."""
    total = T.as_tensor(gan)
    total = total + weights.lambda1 * T.as_tensor(mse)
    total = total + weights.lambda2 * T.as_tensor(perceptual)
    total = total + weights.lambda3 * T.as_tensor(correlation)
    return total


def breakdown(gan, mse, perceptual, correlation, total) -> LossBreakdown:
    def val(x) -> float:
        return x.item() if isinstance(x, Tensor) else float(x)

    return LossBreakdown(val(gan), val(mse), val(perceptual), val(correlation), val(total))
