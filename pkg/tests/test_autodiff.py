import numpy as np
import pytest

from psgr import ops
from psgr.autodiff import (GraphConsumedError, Var, backward, finite_diff,
                           rel_err, run_gradcheck)
from psgr.errors import ValidationError
from psgr.gradchecks import REGISTRY, gradcheck, gradcheck_all
from psgr.tensor import Rng


def test_backward_sum_gives_ones():
    x = Var(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    backward(ops.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_product_rule():
    x = Var(np.array(3.0), requires_grad=True)
    y = Var(np.array(4.0), requires_grad=True)
    backward(ops.mul(x, y))
    assert float(x.grad) == 4.0
    assert float(y.grad) == 3.0


def test_backward_requires_scalar_loss():
    x = Var(np.ones(3), requires_grad=True)
    with pytest.raises(ValidationError):
        backward(ops.scale(x, 2.0))


def test_backward_twice_raises():
    x = Var(np.ones(3), requires_grad=True)
    loss = ops.sum_all(x)
    backward(loss)
    with pytest.raises(GraphConsumedError):
        backward(loss)


def test_backward_zeroes_previous_gradients():
    x = Var(np.ones(4), requires_grad=True)
    backward(ops.sum_all(ops.scale(x, 3.0)))
    first = np.array(x.grad)
    backward(ops.sum_all(ops.scale(x, 3.0)))
    assert np.array_equal(x.grad, first)  # not doubled


def test_unreachable_parameter_gets_zero_grad():
    x = Var(np.ones(3), requires_grad=True, name="x")
    orphan = Var(np.ones(2), requires_grad=True, name="orphan")
    grads = backward(ops.sum_all(x), params={"x": x, "orphan": orphan})
    assert np.array_equal(grads["orphan"], np.zeros(2))
    assert np.array_equal(grads["x"], np.ones(3))


def test_constant_branch_gets_exact_zero():
    x = Var(np.ones(3), requires_grad=True)
    const = Var(np.full(3, 2.0))  # no requires_grad: folded branch
    loss = ops.sum_all(ops.mul(x, const))
    grads = backward(loss, params={"x": x})
    assert np.array_equal(grads["x"], np.full(3, 2.0))
    assert const.grad is None


# ---------------------------------------------------------------------------
# finite differences


def test_finite_diff_sum_of_squares():
    g = finite_diff(lambda x: float((x ** 2).sum()), np.array([1.0, 2.0]))
    assert np.allclose(g, [2.0, 4.0], atol=1e-8)


def test_finite_diff_sigmoid_at_zero():
    g = finite_diff(lambda x: 1.0 / (1.0 + np.exp(-x[0])), np.array([0.0]))
    assert abs(g[0] - 0.25) < 1e-8


def test_rel_err_floor():
    assert rel_err(np.array(0.0), np.array(0.0)) == 0.0
    assert rel_err(np.array(1e-12), np.array(0.0)) < 1e-3


# ---------------------------------------------------------------------------
# registered gradchecks at their spec tolerances


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_registered_gradchecks(name):
    builder, rel_tol = REGISTRY[name]
    report = run_gradcheck(name, builder, seed=0)
    assert report.passed(rel_tol), (name, report.max_rel_err, report.per_param)


def test_gradcheck_tight_examples():
    assert gradcheck("matmul").max_rel_err <= 1e-6
    assert gradcheck("dice").max_rel_err <= 1e-5
    assert gradcheck("gnn_layer").max_rel_err <= 1e-5


def test_gradcheck_unknown_op():
    with pytest.raises(ValidationError):
        gradcheck("not_an_op")


def test_gradcheck_all_under_blanket_tolerance():
    for report, _, _ in gradcheck_all(seed=1):
        assert report.max_rel_err <= 1e-4, report.op


def test_gradcheck_seeds_vary_inputs_not_outcome():
    r0 = gradcheck("conv", seed=0)
    r1 = gradcheck("conv", seed=1)
    assert r0.max_rel_err <= 1e-6 and r1.max_rel_err <= 1e-6
    assert r0.max_abs_err != r1.max_abs_err  # different random draws


# ---------------------------------------------------------------------------
# op-level behaviors not covered by the registry


def test_sigmoid_clamps_extremes():
    v = ops.sigmoid(Var(np.array([1000.0, -1000.0])))
    assert np.isfinite(v.data).all()
    assert v.data[0] > 0.999 and v.data[1] < 0.001


def test_safe_reciprocal_zero_guard():
    d = Var(np.array([2.0, 0.0]), requires_grad=True)
    y = ops.safe_reciprocal(d)
    assert np.array_equal(y.data, [0.5, 0.0])
    backward(ops.sum_all(y))
    assert d.grad[1] == 0.0


def test_safe_rsqrt_zero_guard():
    d = Var(np.array([4.0, 0.0]), requires_grad=True)
    y = ops.safe_rsqrt(d)
    assert np.array_equal(y.data, [0.5, 0.0])
    backward(ops.sum_all(y))
    assert d.grad[1] == 0.0
    assert abs(d.grad[0] + 0.5 * 4.0 ** -1.5) < 1e-12


def test_upsample_constant_exact():
    x = Var(np.full((1, 4, 4, 2), 0.3, dtype=np.float32))
    for factor in (2, 4, 8):
        out = ops.upsample_bilinear(x, factor)
        assert out.data.shape == (1, 4 * factor, 4 * factor, 2)
        assert np.all(out.data == np.float32(0.3))


def test_upsample_checkerboard_hand_values():
    # 2x2 checkerboard upsampled by 2, align_corners=False:
    # source coords (-0.25, 0.25, 0.75, 1.25) -> weights (0, 0.25, 0.75, 1)
    x = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 2, 2, 1)
    out = ops.upsample_bilinear(Var(x), 2).data[0, :, :, 0]
    row_expect = np.array([1.0, 0.75, 0.25, 0.0])
    assert np.allclose(out[0], row_expect, atol=1e-12)
    mid = 1.0 * 0.75 + 0.0 * 0.25  # blended row at wy=0.25
    assert np.allclose(out[1], [mid, 0.625, 0.375, 1 - mid], atol=1e-12)


def test_upsample_rejects_bad_factor():
    with pytest.raises(ValidationError):
        ops.upsample_bilinear(Var(np.zeros((1, 2, 2, 1))), 3)


def test_edge_gather_empty():
    idx = ops.EdgeIndex.from_edges(3, np.zeros(0, np.int64), np.zeros(0, np.int64))
    z = Var(Rng(0).normal((3, 2)), requires_grad=True)
    out = ops.edge_gather(z, idx, np.zeros(0))
    assert np.all(out.data == 0)
