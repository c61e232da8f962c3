import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anydoor import tensor as T
from anydoor.tensor import ShapeError, Tensor
from gradcheck import RandomGraph, rel_err


def test_matmul_shape():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 4)))
    assert (a @ b).shape == (2, 4)


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as e:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))
    msg = str(e.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_add_shape_error():
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3)))


def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_softmax_rows_sum_to_one(xs):
    out = T.softmax(Tensor(np.array(xs)[None, :]), axis=-1)
    assert abs(float(out.data.sum()) - 1.0) < 1e-6


def test_clip_values():
    out = T.clip(Tensor([-0.5, 0.3, 1.7]), 0.0, 1.0)
    np.testing.assert_array_equal(out.data, np.array([0.0, 0.3, 1.0], dtype=np.float32))


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).data.dtype == np.float32


def test_forward_finite_on_finite_inputs():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(4, 8)) * 100)
    y = T.layernorm(T.gelu(x), Tensor(np.ones(8)), Tensor(np.zeros(8)))
    y = T.softmax(y @ Tensor(rng.normal(size=(8, 5))), axis=-1)
    assert np.all(np.isfinite(y.data))


# ----------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform():
    loss = T.cross_entropy(Tensor(np.zeros((1, 4))), [2])
    assert abs(float(loss.data) - math.log(4)) < 1e-6


def test_cross_entropy_saturated():
    logits = np.zeros((1, 5))
    logits[0, 3] = 20.0
    with T.precision(np.float64):
        loss = T.cross_entropy(Tensor(logits), [3])
    assert float(loss.data) < 1e-6


def test_cross_entropy_scalar_oracle():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(3, 5))
    targets = [1, 0, 4]
    with T.precision(np.float64):
        got = float(T.cross_entropy(Tensor(logits), targets).data)
    total = 0.0
    for row, t in zip(logits.tolist(), targets):
        z = sum(math.exp(v) for v in row)
        total += -(row[t] - math.log(z))
    assert abs(got - total / 3) < 1e-12


def test_cross_entropy_strictly_positive():
    rng = np.random.default_rng(1)
    loss = T.cross_entropy(Tensor(rng.normal(size=(4, 6))), [0, 1, 2, 3])
    assert float(loss.data) > 0


def test_cross_entropy_rejects_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        T.cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])


# ----------------------------------------------------------------------------
# backward


def test_backward_quadratic():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    g = T.backward((x * x).sum())
    np.testing.assert_allclose(g[x], [2.0, 4.0, 6.0])


def test_backward_constant_loss_gives_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    g = T.backward((c * c).sum())
    np.testing.assert_array_equal(g[x], np.zeros(2))


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        T.backward(x * x)


def test_chain_additivity():
    # x feeds two branches; its gradient is the sum of both
    x = Tensor([0.5, -1.0, 2.0], requires_grad=True, dtype=np.float64)
    with T.precision(np.float64):
        a = (x * x).sum()
        b = (x * Tensor([3.0, 3.0, 3.0])).sum()
        g = T.backward(a + b)
    np.testing.assert_allclose(g[x], 2 * x.data + 3.0)


def test_grad_shapes_match_tensors():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 4)))
    loss = T.softmax(x @ w + b).sum()
    gw, gb = T.grad(loss, [w, b])
    assert gw.shape == w.shape and gb.shape == b.shape


def test_tape_is_freed_after_backward():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    loss = y.sum()
    T.backward(loss)
    assert loss._prev == () and y._prev == ()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad


def test_determinism():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(6, 5))

    def run():
        x = Tensor(data, requires_grad=True)
        loss = T.layernorm(T.gelu(x), Tensor(np.ones(5)), Tensor(np.zeros(5))).mean()
        return loss.data.copy(), T.backward(loss)[x]

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


@pytest.mark.parametrize("kind", ["matmul", "add", "mul", "softmax", "layernorm", "gelu", "embed_lookup",
                                  "concat", "slice", "reshape", "clip"])
def test_each_op_gradient(kind):
    # depth-2 graphs forced to contain the op under test
    for seed in range(10):
        g = RandomGraph(np.random.default_rng(seed), 2, kinds=(kind,))
        assert g.check() < 1e-3, (kind, seed)


def test_random_graph_outliers_are_truncation_only():
    # at h = 1e-3 a handful of graphs with sharply curved layernorms exceed the
    # tolerance; every one of them must converge once the step shrinks
    import gradcheck

    outliers = []
    for seed in range(2000):
        rng = np.random.default_rng(seed)
        g = RandomGraph(rng, int(rng.integers(1, 7)))
        if g.check() >= 1e-3:
            outliers.append(seed)
    assert len(outliers) <= 10
    old = gradcheck.central_diff.__defaults__
    try:
        gradcheck.central_diff.__defaults__ = (1e-5,)
        for seed in outliers:
            rng = np.random.default_rng(seed)
            g = RandomGraph(rng, int(rng.integers(1, 7)))
            assert g.check() < 1e-3, seed
    finally:
        gradcheck.central_diff.__defaults__ = old


def test_rel_err_floor():
    assert rel_err(0.0, 0.0) == 0.0
    assert rel_err(1.0, 1.001) < 1e-3 + 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_random_graph_property(seed, depth):
    g = RandomGraph(np.random.default_rng(seed), depth)
    # loose bound here; the acceptance suite applies the strict one
    assert g.check() < 1e-2
