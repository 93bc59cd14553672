import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fncgen import losses as L
from fncgen import tensor as T
from fncgen.discriminator import FeatureExtractor
from fncgen.errors import ConfigError, ContractError
from fncgen.tensor import Tensor


def sym_matrix(rng, n=6):
    m = rng.uniform(-0.9, 0.9, (n, n))
    m = (m + m.T) / 2
    np.fill_diagonal(m, 1.0)
    return m


def matrix_with_triangle(tri, n):
    m = np.eye(n)
    rows, cols = np.triu_indices(n, k=1)
    m[rows, cols] = tri
    m[cols, rows] = tri
    return m


def test_d_loss_balanced_logits():
    assert L.d_loss(Tensor(0.0), Tensor(0.0)).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_d_loss_perfect_discriminator_limit():
    assert L.d_loss(Tensor(50.0), Tensor(-50.0)).item() == pytest.approx(0.0, abs=1e-12)


def test_d_loss_monotone_in_symmetric_mislabeling():
    values = [L.d_loss(Tensor(-a), Tensor(a)).item() for a in np.linspace(0.0, 4.0, 17)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_d_loss_decreases_as_logits_separate_correctly():
    values = [L.d_loss(Tensor(a), Tensor(-a)).item() for a in np.linspace(0.0, 4.0, 17)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_g_adv_loss_values():
    assert L.g_adv_loss(Tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-12)
    assert L.g_adv_loss(Tensor(60.0)).item() == pytest.approx(0.0, abs=1e-12)
    assert L.g_adv_loss(Tensor(-2.0)).item() == pytest.approx(np.logaddexp(0, 2.0), abs=1e-12)
    assert L.g_adv_loss(Tensor(-2.0)).item() == pytest.approx(2.126928011, abs=1e-9)


def test_mse_identity_is_zero():
    y = sym_matrix(np.random.default_rng(0))
    assert L.mse_loss(Tensor(y), Tensor(y.copy())).item() == 0.0


def test_mse_uniform_offset():
    n = 6
    y = np.eye(n)
    y_hat = matrix_with_triangle(np.full(n * (n - 1) // 2, 0.5), n)
    assert L.mse_loss(Tensor(y), Tensor(y_hat)).item() == pytest.approx(0.25, abs=1e-15)


def test_mse_matches_bruteforce_loop():
    rng = np.random.default_rng(1)
    y, y_hat = sym_matrix(rng), sym_matrix(rng)
    total, count = 0.0, 0
    for i in range(6):
        for j in range(i + 1, 6):
            total += (y[i, j] - y_hat[i, j]) ** 2
            count += 1
    assert L.mse_loss(Tensor(y), Tensor(y_hat)).item() == pytest.approx(total / count, rel=1e-12)


def test_mse_order_mismatch():
    with pytest.raises(ContractError, match="orders differ"):
        L.mse_loss(Tensor(np.eye(4)), Tensor(np.eye(5)))


def test_correlation_identity_is_exactly_zero():
    y = sym_matrix(np.random.default_rng(2))
    assert abs(L.correlation_loss(Tensor(y), Tensor(y.copy())).item()) < 1e-12


def test_correlation_negation_is_exactly_two():
    y = sym_matrix(np.random.default_rng(3))
    y_hat = -y.copy()
    np.fill_diagonal(y_hat, 1.0)
    assert abs(L.correlation_loss(Tensor(y), Tensor(y_hat)).item() - 2.0) < 1e-12


def test_correlation_hand_case():
    y = matrix_with_triangle([1.0, 2.0, 3.0], 3)
    y_hat = matrix_with_triangle([1.0, 2.0, 4.0], 3)
    expected = 1.0 - 3.0 * math.sqrt(21.0) / 14.0
    assert L.correlation_loss(Tensor(y), Tensor(y_hat)).item() == pytest.approx(expected, abs=1e-12)


def test_correlation_degenerate_returns_one():
    y = sym_matrix(np.random.default_rng(4))
    flat = matrix_with_triangle(np.full(15, 0.2), 6)
    assert L.correlation_loss(Tensor(y), Tensor(flat)).item() == 1.0


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_correlation_range(seed):
    rng = np.random.default_rng(seed)
    y, y_hat = sym_matrix(rng), sym_matrix(rng)
    value = L.correlation_loss(Tensor(y), Tensor(y_hat)).item()
    assert 0.0 <= value <= 2.0


@settings(max_examples=40)
@given(st.integers(0, 10_000),
       st.floats(0.1, 10.0), st.floats(-0.5, 0.5))
def test_correlation_affine_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    y, y_hat = sym_matrix(rng), sym_matrix(rng)
    base = L.correlation_loss(Tensor(y), Tensor(y_hat)).item()
    rows, cols = np.triu_indices(6, k=1)
    scaled = y_hat.copy()
    scaled[rows, cols] = scale * y_hat[rows, cols] + shift
    scaled[cols, rows] = scaled[rows, cols]
    assert L.correlation_loss(Tensor(y), Tensor(scaled)).item() == pytest.approx(base, abs=1e-10)


def feature_net(n=6):
    return FeatureExtractor(fnc_order=n, patch=3, d_model=8, n_heads=2, n_blocks=2,
                            ffn_hidden=12, seed=77)


def test_perceptual_zero_at_identity():
    net = feature_net()
    y = sym_matrix(np.random.default_rng(5))
    assert L.perceptual_loss(Tensor(y), Tensor(y.copy()), net, blocks=(1, 2)).item() == 0.0


def test_perceptual_nonnegative_and_sensitive():
    net = feature_net()
    rng = np.random.default_rng(6)
    y = sym_matrix(rng)
    base = L.perceptual_loss(Tensor(y), Tensor(y.copy()), net, blocks=(2,)).item()
    for trial in range(5):
        bumped = y.copy()
        i, j = sorted(rng.choice(6, size=2, replace=False))
        bumped[i, j] += 0.05
        bumped[j, i] += 0.05
        value = L.perceptual_loss(Tensor(y), Tensor(bumped), net, blocks=(2,)).item()
        assert value > base >= 0.0


def test_perceptual_block_validation():
    net = feature_net()
    y = sym_matrix(np.random.default_rng(7))
    with pytest.raises(ConfigError, match="out of range"):
        L.perceptual_loss(Tensor(y), Tensor(y), net, blocks=(3,))
    with pytest.raises(ConfigError):
        L.perceptual_loss(Tensor(y), Tensor(y), net, blocks=())


def test_perceptual_accepts_precomputed_real_features():
    net = feature_net()
    rng = np.random.default_rng(8)
    y, y_hat = sym_matrix(rng), sym_matrix(rng)
    with T.no_grad():
        feats = net.extract_features(y)
    a = L.perceptual_loss(Tensor(y), Tensor(y_hat), net, blocks=(1,), real_features=feats).item()
    b = L.perceptual_loss(Tensor(y), Tensor(y_hat), net, blocks=(1,)).item()
    assert a == b


def test_total_reduces_to_gan_with_zero_weights():
    gan = Tensor(0.731)
    total = L.total_g_loss(gan, Tensor(5.0), Tensor(7.0), Tensor(9.0), L.LossWeights(0, 0, 0))
    assert total.item() == gan.item()


def test_total_unit_weights():
    total = L.total_g_loss(Tensor(1.0), Tensor(1.0), Tensor(1.0), Tensor(1.0),
                           L.LossWeights(1, 1, 1))
    assert total.item() == pytest.approx(4.0, abs=1e-15)


def test_total_hand_arithmetic():
    total = L.total_g_loss(Tensor(0.7), Tensor(0.02), Tensor(0.01), Tensor(0.1),
                           L.LossWeights(10.0, 0.5, 1.0))
    assert total.item() == pytest.approx(1.005, abs=1e-12)


def test_breakdown_invariant():
    w = L.LossWeights(10.0, 0.5, 1.0)
    gan, mse, perc, corr = Tensor(0.3), Tensor(0.02), Tensor(0.15), Tensor(0.4)
    total = L.total_g_loss(gan, mse, perc, corr, w)
    b = L.breakdown(gan, mse, perc, corr, total)
    assert abs(b.total - (b.gan + w.lambda1 * b.mse + w.lambda2 * b.perceptual
                          + w.lambda3 * b.correlation)) < 1e-12


def test_negative_weights_rejected():
    with pytest.raises(ConfigError, match="lambda2"):
        L.LossWeights(1.0, -0.1, 1.0)


def test_losses_differentiable_through_correlation_quotient():
    rng = np.random.default_rng(9)
    y = sym_matrix(rng)
    y_hat = Tensor(sym_matrix(rng), requires_grad=True)
    loss = L.correlation_loss(Tensor(y), y_hat)
    T.backward(loss)
    grad = y_hat.grad
    h = 1e-6
    worst = 0.0
    for (i, j) in [(0, 1), (1, 4), (2, 5)]:
        base = y_hat.data.copy()
        base[i, j] += h
        up = L.correlation_loss(Tensor(y), Tensor(base)).item()
        base[i, j] -= 2 * h
        down = L.correlation_loss(Tensor(y), Tensor(base)).item()
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(grad[i, j] - numeric) / max(abs(numeric), 1e-3))
    assert worst < 1e-4


def test_batched_losses_average_over_subjects():
    rng = np.random.default_rng(10)
    ys = np.stack([sym_matrix(rng) for _ in range(3)])
    yhs = np.stack([sym_matrix(rng) for _ in range(3)])
    batched = L.correlation_loss(Tensor(ys), Tensor(yhs)).item()
    single = np.mean([
        L.correlation_loss(Tensor(ys[i]), Tensor(yhs[i])).item() for i in range(3)
    ])
    assert batched == pytest.approx(single, rel=1e-12)
    batched_mse = L.mse_loss(Tensor(ys), Tensor(yhs)).item()
    single_mse = np.mean([L.mse_loss(Tensor(ys[i]), Tensor(yhs[i])).item() for i in range(3)])
    assert batched_mse == pytest.approx(single_mse, rel=1e-12)
