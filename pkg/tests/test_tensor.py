import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dede import tensor as T
from dede.selftest import GRAD_RTOL, check_function, primitive_checks, transformer_check
from dede.rng import Rng
from dede.tensor import ContractError, DomainError, Graph, Tensor

finite = st.floats(-5, 5, allow_nan=False, width=64)


def rows(min_rows=1, max_rows=6, min_cols=1, max_cols=8):
    shape = st.tuples(st.integers(min_rows, max_rows), st.integers(min_cols, max_cols))
    return hnp.arrays(np.float64, shape, elements=finite)


@pytest.mark.parametrize("check", primitive_checks(), ids=lambda c: c.name)
def test_primitive_gradient_matches_finite_difference(check):
    assert check.max_rel_error <= GRAD_RTOL


def test_two_block_transformer_gradient_matches_finite_difference():
    assert transformer_check().max_rel_error <= GRAD_RTOL


def test_every_listed_primitive_is_registered():
    expected = {"matmul", "add", "mul", "scale", "transpose", "reshape", "slice", "concat", "mean", "sum",
                "relu", "gelu", "softmax_lastdim", "layernorm_lastdim", "mse", "cosine_similarity",
                "cross_entropy_with_logits", "exp", "log"}
    assert set(T.PRIMITIVES) == expected


def test_matmul_identity():
    a = Rng(1).standard_normal((3, 3))
    out = T.apply_primitive("matmul", Tensor(np.eye(3), dtype=np.float64), Tensor(a, dtype=np.float64))
    np.testing.assert_array_equal(out.data, a)


def test_softmax_of_zeros_is_uniform():
    out = T.softmax_lastdim(Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-7)


def test_cosine_scale_invariance():
    v = Tensor(np.array([[1.0, -2.0, 0.5]]), dtype=np.float64)
    assert T.cosine_similarity(v, T.scale(v, 2.0)).item() == pytest.approx(1.0, abs=1e-12)


def test_backward_square():
    x = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    with Graph() as g:
        loss = T.sum_(T.mul(x, x))
    grads = g.backward(loss)
    np.testing.assert_array_equal(grads[x], [6.0])
    np.testing.assert_array_equal(x.grad, [6.0])


def test_mse_of_self_has_zero_gradient():
    x = Tensor(Rng(2).standard_normal((4, 3)), requires_grad=True, dtype=np.float64)
    with Graph() as g:
        loss = T.mse(x, x)
    g.backward(loss)
    np.testing.assert_array_equal(x.grad, np.zeros((4, 3)))


def test_gradient_accumulates_across_uses_and_passes():
    x = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    for _ in range(2):
        with Graph() as g:
            loss = T.sum_(T.add(T.scale(x, 3.0), T.mul(x, x)))
        g.backward(loss)
    np.testing.assert_array_equal(x.grad, [2 * (3.0 + 4.0)])
    x.zero_grad()
    assert x.grad is None


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Graph() as g:
        y = T.scale(x, 2.0)
    with pytest.raises(ContractError):
        g.backward(y)


def test_shape_mismatch_names_primitive():
    with pytest.raises(ContractError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ContractError, match="add"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_log_domain():
    with pytest.raises(DomainError):
        T.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(DomainError):
        T.log(Tensor(np.array([-1.0])))


def test_unknown_primitive():
    with pytest.raises(ContractError):
        T.apply_primitive("conv2d", Tensor(np.ones(2)))


def test_no_recording_outside_graph_or_without_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.scale(x, 2.0)
    assert y.is_leaf and not y.requires_grad
    with Graph() as g:
        T.scale(Tensor(np.ones(3)), 2.0)
    assert len(g) == 0


def test_graph_nodes_are_topological():
    x = Tensor(np.ones((2, 2)), requires_grad=True, dtype=np.float64)
    with Graph() as g:
        h = T.relu(T.matmul(x, x))
        T.mean(T.add(h, x))
    seen = {id(x)}
    for node in g.nodes:
        for inp in node.inputs:
            assert inp.is_leaf or id(inp) in seen
        seen.add(id(node.output))


@given(rows())
def test_softmax_rows_are_distributions(a):
    out = T.softmax_lastdim(Tensor(a, dtype=np.float64)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


@given(rows(min_cols=2).filter(lambda a: (a.std(axis=-1) > 0.5).all()))
def test_layernorm_rows_standardized(a):
    out = T.layernorm_lastdim(Tensor(a, dtype=np.float64)).data
    assert np.abs(out.mean(axis=-1)).max() <= 1e-6
    assert np.abs(out.var(axis=-1) - 1.0).max() <= 1e-4


@given(rows())
def test_primitives_keep_finite_values(a):
    x = Tensor(a, dtype=np.float64)
    for out in (T.gelu(x), T.relu(x), T.exp(x), T.softmax_lastdim(x), T.l2_normalize(x), T.clamp01(x)):
        assert np.isfinite(out.data).all()


@given(rows())
def test_clamp01_matches_clip(a):
    np.testing.assert_array_equal(T.clamp01(Tensor(a, dtype=np.float64)).data, np.clip(a, 0, 1))


@given(st.integers(0, 2**31))
def test_random_composite_gradient(seed):
    rng = Rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    check = check_function("composite", lambda t: T.softmax_lastdim(T.gelu(T.matmul(t[0], t[1]))), [a, b],
                           rng.child("w"))
    assert check.max_rel_error <= GRAD_RTOL
