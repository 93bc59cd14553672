import numpy as np

from fncgen import tensor as T
from fncgen.gradcheck import (
    CheckSpec,
    core_suite,
    relative_error,
    run_check,
    run_gradcheck,
    suite_covers,
    format_table,
)
from fncgen.tensor import DIFFERENTIABLE_OPS


def test_core_suite_passes():
    results = [run_check(s, seed=11 + i) for i, s in enumerate(core_suite())]
    assert all(r.passed for r in results), format_table(results)


def test_suite_covers_every_registered_op():
    assert DIFFERENTIABLE_OPS <= suite_covers()


def test_broken_backward_rule_is_detected():
    def broken_mul(a, b):
        a, b = T.as_tensor(a), T.as_tensor(b)
        data = a.data * b.data

        # wrong on purpose: swaps nothing, returns raw upstream grad
        def bwd(g):
            return g, g

        return T._result(data, (a, b), bwd, "broken-mul")

    def build(rng):
        a, b = rng.uniform(1.5, 2.5, (3, 3)), rng.uniform(1.5, 2.5, (3, 3))
        return [a, b], lambda x, y: broken_mul(x, y).sum()

    result = run_check(CheckSpec("broken-mul", build), seed=0)
    assert not result.passed
    assert result.max_rel_err > 0.1


def test_relative_error_floor_for_tiny_grads():
    assert relative_error(np.array([0.0]), np.array([1e-9])) < 1e-4
    assert relative_error(np.array([1.0]), np.array([2.0])) == 0.5


def test_full_suite_with_composites_passes():
    results = run_gradcheck(seed=3)
    assert all(r.passed for r in results), format_table(results)
    names = {r.name for r in results}
    assert "end-to-end-generator" in names
    assert "loss-correlation" in names and "loss-perceptual" in names
