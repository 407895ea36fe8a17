import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biagree import autodiff as ad


def P(**arrays):
    return ad.ParamStore({k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})


def test_add_scalars():
    out = ad.add(ad.constant(2.0), ad.constant(3.0))
    assert out.value == 5.0


def test_softmax_uniform():
    out = ad.softmax(ad.constant(np.zeros((1, 3))))
    np.testing.assert_allclose(out.value, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_matmul_shape_rule():
    out = ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((3, 4))))
    assert out.shape == (2, 4)
    np.testing.assert_array_equal(out.value, np.full((2, 4), 3.0))


@pytest.mark.parametrize("kind,shapes", [
    ("add", [(2, 3), (3, 2)]),
    ("multiply", [(2,), (3,)]),
    ("matrix-multiply", [(2, 3), (2, 3)]),
])
def test_shape_mismatch_names_kind_and_shapes(kind, shapes):
    nodes = [ad.constant(np.ones(s)) for s in shapes]
    with pytest.raises(ad.ShapeError) as e:
        ad.apply_primitive(kind, nodes)
    assert kind in str(e.value)
    assert str(shapes[0]) in str(e.value)


def test_unknown_primitive():
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.apply_primitive("relu", [ad.constant(1.0)])


def test_product_rule():
    p = P(x=2.0, y=3.0)
    nodes = p.nodes()
    g = ad.backward(ad.multiply(nodes["x"], nodes["y"]), p)
    assert g["x"] == 3.0 and g["y"] == 2.0


def test_sum_of_softmax_has_exactly_zero_gradient():
    rng = np.random.default_rng(0)
    p = P(z=rng.normal(size=(4, 5)) * 3)
    g = ad.backward(ad.sum_(ad.softmax(p.node("z"))), p)
    assert np.all(g["z"] == 0.0)


def test_reused_node_accumulates():
    # f = x + x*x at x=3 -> df/dx = 1 + 2x = 7
    p = P(x=3.0)
    x = p.node("x")
    g = ad.backward(ad.add(x, ad.multiply(x, x)), p)
    assert g["x"] == 7.0


def test_unreached_parameter_gets_zero():
    p = P(a=np.ones(2), b=np.ones((2, 2)))
    g = ad.backward(ad.sum_(p.node("a")), p)
    np.testing.assert_array_equal(g["b"], np.zeros((2, 2)))


def test_non_scalar_root_rejected():
    p = P(a=np.ones(2))
    with pytest.raises(ad.ShapeError):
        ad.backward(p.node("a"), p)


def test_non_finite_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.constant([0.0, 1.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.constant([np.nan])


def test_param_store_names_unique_and_shapes_fixed():
    p = P(a=np.ones(3))
    with pytest.raises(KeyError):
        p.add("a", np.ones(3))
    with pytest.raises(ad.ShapeError):
        p["a"] = np.ones(4)
    assert p.size == 3


def test_indices_are_copied_at_graph_build():
    p = P(E=np.arange(6.0).reshape(3, 2))
    idx = np.array([0, 1])
    out = ad.embed(p.node("E"), idx)
    idx[:] = 2
    g = ad.backward(ad.sum_(out), p)
    np.testing.assert_array_equal(g["E"], [[1, 1], [1, 1], [0, 0]])


# --- finite differences -----------------------------------------------------


def test_fd_linear_function_is_exact():
    p = P(w=np.array([1.0, -2.0, 0.5]))
    fn = lambda q: ad.sum_(ad.scale(q.node("w"), 3.0))
    assert ad.finite_diff_check(fn, p) < 1e-9


def test_fd_quadratic_central_difference():
    p = P(p=np.array([1.0]))
    fn = lambda q: ad.sum_(ad.multiply(q.node("p"), q.node("p")))
    assert ad.finite_diff_check(fn, p, step=1e-4) < 1e-8


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda q: ad.constant(0.0), P(a=1.0), step=0)


def test_fd_random_three_layer_composition():
    rng = np.random.default_rng(3)
    p = P(W1=rng.normal(size=(4, 5)), W2=rng.normal(size=(5, 3)), b=rng.normal(size=(1, 5)))

    def fn(q):
        n = q.nodes()
        x = ad.constant(rng_x)
        h = ad.tanh(ad.add(ad.matmul(x, n["W1"]), ad.embed(n["b"], np.zeros(2, dtype=int))))
        s = ad.softmax(ad.matmul(ad.sigmoid(h), n["W2"]))
        return ad.sum_(ad.log(ad.pick(s, np.array([0, 2]))))

    rng_x = rng.normal(size=(2, 4))
    assert ad.finite_diff_check(fn, p) < 1e-4


# one random case per primitive: analytic vs central differences
W = np.random.default_rng(99).normal(size=64)


def wsum(out):
    """Scalar that touches every output entry with a distinct weight."""
    return ad.sum_(ad.multiply(out, ad.constant(np.resize(W, out.shape))))


def _unary(op, positive=False):
    def build(rng, shape):
        v = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
        return P(a=v), lambda q: wsum(op(q.node("a")))
    return build


def _binary(op):
    def build(rng, shape):
        return P(a=rng.normal(size=shape), b=rng.normal(size=shape)), lambda q: wsum(op(q.node("a"), q.node("b")))
    return build


def _mm(rng, shape):
    p = P(a=rng.normal(size=shape), b=rng.normal(size=(shape[-1], 3)))
    return p, lambda q: wsum(ad.matmul(q.node("a"), q.node("b")))


def _concat(rng, shape):
    p = P(a=rng.normal(size=shape), b=rng.normal(size=shape))
    return p, lambda q: wsum(ad.concat([q.node("a"), q.node("b")], axis=-1))


def _embed(rng, shape):
    idx = rng.integers(0, 4, size=5)
    return P(E=rng.normal(size=(4, shape[-1]))), lambda q: wsum(ad.embed(q.node("E"), idx))


def _pick(rng, shape):
    idx = rng.integers(0, shape[1], size=shape[0])
    return P(a=rng.normal(size=shape)), lambda q: wsum(ad.pick(q.node("a"), idx))


BUILDERS = {
    "add": _binary(lambda a, b: ad.add(a, b)),
    "multiply": _binary(ad.multiply),
    "matrix-multiply": _mm,
    "concatenate": _concat,
    "embedding-lookup": _embed,
    "tanh": _unary(ad.tanh),
    "sigmoid": _unary(ad.sigmoid),
    "softmax-over-last-axis": _unary(ad.softmax),
    "log": _unary(ad.log, positive=True),
    "pick-index": _pick,
    "sum": _unary(lambda a: ad.sum_(a, axis=0)),
    "scalar-scale": _unary(lambda a: ad.scale(a, -1.7)),
    "reshape": _unary(lambda a: ad.reshape(a, (a.value.size,))),
}


def test_every_primitive_has_a_gradient_case():
    assert set(BUILDERS) == set(ad.PRIMITIVES)


@pytest.mark.parametrize("kind", sorted(BUILDERS))
@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shape=st.sampled_from([(3,), (2, 3), (3, 4), (1, 5)]))
def test_primitive_gradients_match_finite_differences(kind, seed, shape):
    rng = np.random.default_rng(seed)
    if kind in ("matrix-multiply", "pick-index") and len(shape) == 1:
        shape = (2, shape[0])
    p, fn = BUILDERS[kind](rng, shape)
    assert ad.finite_diff_check(fn, p) < 1e-4


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rows=st.integers(1, 4), cols=st.integers(1, 6))
def test_softmax_rows_positive_and_normalised(seed, rows, cols):
    z = np.random.default_rng(seed).normal(scale=10, size=(rows, cols))
    s = ad.softmax(ad.constant(z)).value
    assert np.all(s > 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_batched_matmul_3d():
    rng = np.random.default_rng(1)
    p = P(a=rng.normal(size=(2, 3, 4)), b=rng.normal(size=(2, 4, 2)), c=rng.normal(size=(4, 5)))
    fn = lambda q: ad.add(ad.sum_(ad.matmul(q.node("a"), q.node("b"))),
                          ad.sum_(ad.tanh(ad.matmul(q.node("a"), q.node("c")))))
    assert ad.finite_diff_check(fn, p) < 1e-4
