"""Finite-difference verification of every registered backward rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_TOL = 1e-4
END_TO_END_TOL = 1e-3
_H = 1e-5
_REL_FLOOR = 1e-3  # entries smaller than this are compared absolutely


@dataclass(frozen=True)
class CheckSpec:
    """One gradcheck case: `build(rng)` returns (input arrays, scalar fn)."""

    name: str
    build: Callable[[np.random.Generator], tuple[list[np.ndarray], Callable[..., Tensor]]]
    tol: float = DEFAULT_TOL
    covers: tuple[str, ...] = field(default=())


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradients(fn: Callable[..., Tensor], arrays: list[np.ndarray], h: float = _H) -> list[np.ndarray]:
    """Central differences of a scalar-valued tensor function, per input element."""

    def value(arrs: list[np.ndarray]) -> float:
        with T.no_grad():
            return fn(*(Tensor(a) for a in arrs)).item()

    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        for j in range(base.size):
            bumped = [a.copy() for a in arrays]
            bumped[i].reshape(-1)[j] += h
            up = value(bumped)
            bumped[i].reshape(-1)[j] -= 2 * h
            down = value(bumped)
            flat[j] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def run_check(spec: CheckSpec, seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    arrays, fn = spec.build(rng)
    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*inputs)
    T.backward(out)
    numeric = numeric_gradients(fn, arrays)
    worst = 0.0
    for t, num in zip(inputs, numeric):
        analytic = t.grad if t.grad is not None else np.zeros_like(num)
        worst = max(worst, relative_error(analytic, num))
    return CheckResult(spec.name, worst, spec.tol)


def check_parameters(name: str, params: dict[str, Tensor], loss_fn: Callable[[], Tensor],
                     tol: float = END_TO_END_TOL, h: float = _H) -> CheckResult:
    """Compare analytic parameter gradients of `loss_fn` against central differences.

    `loss_fn` must recompute the loss from the parameters' current data on
    every call.
    """
    T.zero_grads(params.values())
    T.backward(loss_fn())
    worst = 0.0
    for p in params.values():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat_data = p.data.reshape(-1)
        flat_num = numeric.reshape(-1)
        for j in range(flat_data.size):
            orig = flat_data[j]
            flat_data[j] = orig + h
            with T.no_grad():
                up = loss_fn().item()
            flat_data[j] = orig - h
            with T.no_grad():
                down = loss_fn().item()
            flat_data[j] = orig
            flat_num[j] = (up - down) / (2 * h)
        worst = max(worst, relative_error(analytic, numeric))
    return CheckResult(name, worst, tol)


def _reducer(rng: np.random.Generator, shape: tuple[int, ...]):
    """Scalar reduction with weights drawn once, so repeated calls are pure."""
    w = Tensor(rng.normal(size=shape))
    return lambda out: (out * w).sum()


def _u(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def core_suite() -> list[CheckSpec]:
    """Cases covering every entry of tensor.DIFFERENTIABLE_OPS."""

    def binary(op):
        def build(rng):
            a, b = _u(rng, 3, 4), _u(rng, 3, 4)
            red = _reducer(rng, (3, 4))
            return [a, b], lambda x, y: red(op(x, y))

        return build

    def unary(op, sampler=None):
        def build(rng):
            a = _u(rng, 4, 5) if sampler is None else sampler(rng)
            red = _reducer(rng, (4, 5))
            return [a], lambda x: red(op(x))

        return build

    positive = lambda rng: rng.uniform(0.5, 2.5, size=(4, 5))

    def div_build(rng):
        a = _u(rng, 3, 4)
        b = np.where(_u(rng, 3, 4) >= 0, 1.0, -1.0) * rng.uniform(0.5, 2.5, size=(3, 4))
        red = _reducer(rng, (3, 4))
        return [a, b], lambda x, y: red(T.div(x, y))

    def matmul_build(rng):
        a, b = _u(rng, 3, 4), _u(rng, 4, 2)
        red = _reducer(rng, (3, 2))
        return [a, b], lambda x, y: red(T.matmul(x, y))

    def matmul_batched_build(rng):
        a, b = _u(rng, 2, 3, 4), _u(rng, 2, 4, 2)
        red = _reducer(rng, (2, 3, 2))
        return [a, b], lambda x, y: red(T.matmul(x, y))

    def matmul_broadcast_build(rng):
        a, b = _u(rng, 5, 3), _u(rng, 2, 3, 4)
        red = _reducer(rng, (2, 5, 4))
        return [a, b], lambda x, y: red(T.matmul(x, y))

    def scalar_mul_build(rng):
        a = _u(rng, 3, 4)
        red = _reducer(rng, (3, 4))
        return [a], lambda x: red(x * 1.7)

    def reshape_build(rng):
        a = _u(rng, 2, 6)
        red = _reducer(rng, (3, 4))
        return [a], lambda x: red(x.reshape(3, 4))

    def transpose_build(rng):
        a = _u(rng, 2, 3, 4)
        red = _reducer(rng, (3, 4, 2))
        return [a], lambda x: red(T.transpose(x, (1, 2, 0)))

    def concat_build(rng):
        a, b = _u(rng, 2, 3), _u(rng, 4, 3)
        red = _reducer(rng, (6, 3))
        return [a, b], lambda x, y: red(T.concat([x, y], axis=0))

    def slice_build(rng):
        a = _u(rng, 4, 6)
        red = _reducer(rng, (2, 3))
        return [a], lambda x: red(x[1:3, ::2])

    def take_pairs_build(rng):
        a = _u(rng, 2, 4, 4)
        rows, cols = np.triu_indices(4, k=1)
        red = _reducer(rng, (2, 6))
        return [a], lambda x: red(T.take_pairs(x, rows, cols))

    def pad_build(rng):
        a = _u(rng, 3, 4)
        red = _reducer(rng, (5, 5))
        return [a], lambda x: red(T.pad(x, ((0, 2), (1, 0))))

    def reduce_build(op):
        def build(rng):
            a = _u(rng, 3, 4, 2)
            red = _reducer(rng, (3, 2))
            return [a], lambda x: red(op(x, axis=1))

        return build

    def mean_all_build(rng):
        a = _u(rng, 3, 4)
        return [a], lambda x: T.tmean(x)

    def softmax_build(rng):
        a = _u(rng, 3, 5)
        red = _reducer(rng, (3, 5))
        return [a], lambda x: red(T.softmax(x, axis=-1))

    def layernorm_build(rng):
        x, gamma, beta = _u(rng, 5, 8), _u(rng, 8), _u(rng, 8)
        red = _reducer(rng, (5, 8))
        return [x, gamma, beta], lambda a, g, b: red(T.layernorm(a, g, b))

    def clip_min_build(rng):
        a = _u(rng, 4, 4)
        a[np.abs(a - 0.5) < 0.1] += 0.3  # keep away from the kink
        red = _reducer(rng, (4, 4))
        return [a], lambda x: red(T.clip_min(x, 0.5))

    def softmax_xent_build(rng):
        logits = _u(rng, 4, 6)
        onehot = np.eye(6)[rng.integers(0, 6, size=4)]
        target = Tensor(onehot)
        return [logits], lambda x: -(target * T.softmax(x, axis=-1).log()).sum(axis=-1).mean()

    c = CheckSpec
    return [
        c("add", binary(T.add), covers=("add",)),
        c("sub", binary(T.sub), covers=("sub",)),
        c("mul", binary(T.mul), covers=("mul",)),
        c("div", div_build, covers=("div",)),
        c("neg", unary(T.neg), covers=("neg",)),
        c("scalar-mul", scalar_mul_build, covers=("mul",)),
        c("tanh", unary(T.tanh), covers=("tanh",)),
        c("gelu", unary(T.gelu), covers=("gelu",)),
        c("exp", unary(T.texp), covers=("exp",)),
        c("log", unary(T.tlog, positive), covers=("log",)),
        c("sqrt", unary(T.tsqrt, positive), covers=("sqrt",)),
        c("softplus", unary(T.softplus), covers=("softplus",)),
        c("clip_min", clip_min_build, covers=("clip_min",)),
        c("matmul", matmul_build, covers=("matmul",)),
        c("matmul-batched", matmul_batched_build, covers=("matmul",)),
        c("matmul-broadcast", matmul_broadcast_build, covers=("matmul",)),
        c("reshape", reshape_build, covers=("reshape",)),
        c("transpose", transpose_build, covers=("transpose",)),
        c("concat", concat_build, covers=("concat",)),
        c("slice", slice_build, covers=("slice",)),
        c("take_pairs", take_pairs_build, covers=("take_pairs",)),
        c("pad", pad_build, covers=("pad",)),
        c("sum", reduce_build(T.tsum), covers=("sum",)),
        c("mean", reduce_build(T.tmean), covers=("mean",)),
        c("mean-all", mean_all_build, covers=("mean",)),
        c("variance", reduce_build(T.variance), covers=("variance",)),
        c("softmax", softmax_build, covers=("softmax",)),
        c("layernorm", layernorm_build, covers=("layernorm",)),
        c("softmax-xent", softmax_xent_build, covers=("softmax", "log")),
    ]


def loss_suite() -> list[CheckSpec]:
    """Composite loss paths, differentiated w.r.t. the generated matrix."""
    from . import losses
    from .discriminator import FeatureExtractor

    n = 6

    def feature_net():
        return FeatureExtractor(fnc_order=n, patch=3, d_model=8, n_heads=2,
                                n_blocks=2, ffn_hidden=12, seed=99)

    def sym_fnc(rng):
        y = rng.uniform(-0.9, 0.9, size=(n, n))
        y = (y + y.T) / 2
        np.fill_diagonal(y, 1.0)
        return y

    def mse_build(rng):
        y, yh = sym_fnc(rng), rng.uniform(-0.9, 0.9, size=(n, n))
        return [yh], lambda t: losses.mse_loss(Tensor(y), t)

    def corr_build(rng):
        y, yh = sym_fnc(rng), rng.uniform(-0.9, 0.9, size=(n, n))
        return [yh], lambda t: losses.correlation_loss(Tensor(y), t)

    def perceptual_build(rng):
        net = feature_net()
        y, yh = sym_fnc(rng), rng.uniform(-0.9, 0.9, size=(n, n))
        return [yh], lambda t: losses.perceptual_loss(Tensor(y), t, net, blocks=(1, 2))

    def adv_build(rng):
        return [_u(rng, 3)], lambda t: losses.g_adv_loss(t)

    def d_loss_build(rng):
        return [_u(rng, 3), _u(rng, 3)], lambda a, b: losses.d_loss(a, b)

    def disc_input_build(rng):
        from .discriminator import Discriminator
        disc = Discriminator(fnc_order=n, patch=3, d_model=8, n_heads=2, n_blocks=1,
                             ffn_hidden=12, class_conditioning=True,
                             rng=np.random.default_rng(17))
        yh = rng.uniform(-0.9, 0.9, size=(1, n, n))
        label = np.array([0])
        return [yh], lambda t: disc.forward(t, label).mean()

    return [
        CheckSpec("loss-mse", mse_build, covers=()),
        CheckSpec("loss-correlation", corr_build, covers=()),
        CheckSpec("loss-perceptual", perceptual_build, covers=()),
        CheckSpec("loss-g-adv", adv_build, covers=()),
        CheckSpec("loss-d", d_loss_build, covers=()),
        CheckSpec("discriminator-input-grad", disc_input_build, covers=()),
    ]


def end_to_end_check(seed: int = 0) -> CheckResult:
    """Total generator objective differentiated w.r.t. every generator parameter."""
    from . import losses
    from .discriminator import Discriminator, FeatureExtractor
    from .generator import Generator

    n = 6
    rng = np.random.default_rng(seed)
    gen = Generator(vol_dims=(8, 8, 8), patch=4, d_model=8, n_heads=2, n_blocks=1,
                    ffn_hidden=12, fnc_order=n, fragment_side=3, class_conditioning=True,
                    rng=np.random.default_rng(5))
    disc = Discriminator(fnc_order=n, patch=3, d_model=8, n_heads=2, n_blocks=1,
                         ffn_hidden=12, class_conditioning=True,
                         rng=np.random.default_rng(6))
    net = FeatureExtractor(fnc_order=n, patch=3, d_model=8, n_heads=2, n_blocks=2,
                           ffn_hidden=12, seed=99)
    for p in disc.named_params().values():
        p.requires_grad = False
    # move off the fresh-init point: a near-constant generator output puts the
    # correlation quotient close to its singularity, where finite differences
    # drown in curvature rather than measure the backward rule
    for p in gen.named_params().values():
        p.data = p.data + rng.normal(0.0, 0.15, size=p.data.shape)
    vol = rng.uniform(0.0, 1.0, size=(1, 8, 8, 8))
    label = np.array([1])
    y = rng.uniform(-0.9, 0.9, size=(n, n))
    y = (y + y.T) / 2
    np.fill_diagonal(y, 1.0)
    y_t = Tensor(y[None])
    weights = losses.LossWeights(1.0, 1.0, 1.0)

    def loss_fn() -> Tensor:
        yh = gen.forward(vol, label)
        gan = losses.g_adv_loss(disc.forward(yh, label))
        mse = losses.mse_loss(y_t, yh)
        perc = losses.perceptual_loss(y_t, yh, net, blocks=(1,))
        corr = losses.correlation_loss(y_t, yh)
        return losses.total_g_loss(gan, mse, perc, corr, weights)

    return check_parameters("end-to-end-generator", gen.named_params(), loss_fn)


def run_gradcheck(seed: int = 0, include_composites: bool = True,
                  extra: Sequence[CheckSpec] = ()) -> list[CheckResult]:
    specs = core_suite() + (loss_suite() if include_composites else []) + list(extra)
    results = [run_check(s, seed + i) for i, s in enumerate(specs)]
    if include_composites:
        results.append(end_to_end_check(seed))
    return results


def suite_covers() -> set[str]:
    return set().union(*(s.covers for s in core_suite()))


def format_table(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  {'tol':>8}  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:>12.3e}  {r.tol:>8.0e}  {status}")
    return "\n".join(lines)
