import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenediff import tensor as tn
from scenediff.tensor import Tensor


def fd_grad(f, x, eps=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def test_clip_min_and_where():
    assert np.array_equal(tn.clip_min(Tensor([-1.0, 2.0]), 0.0).data, [0.0, 2.0])
    out = tn.elementwise("where", np.array([1, 0]), Tensor([5.0, 5.0]), Tensor([7.0, 7.0]))
    assert np.array_equal(out.data, [5.0, 7.0])


def test_sigmoid_derivative_at_zero():
    _, (g,) = tn.grad(lambda x: tn.sum_(tn.sigmoid(x)), np.array([0.0]))
    num = fd_grad(lambda x: 1 / (1 + np.exp(-x[0])), [0.0])
    assert g[0] == pytest.approx(0.25, abs=1e-12)
    assert g[0] == pytest.approx(num[0], abs=1e-9)


def test_unknown_elementwise_kind():
    with pytest.raises(ValueError, match="unknown elementwise"):
        tn.elementwise("tan", Tensor([1.0]))


def test_matmul_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(tn.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert np.array_equal(tn.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])
    with pytest.raises(tn.ShapeError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_is_row_sums_of_b_transposed():
    rng = np.random.default_rng(0)
    A, Bm = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    _, (g,) = tn.grad(lambda a: tn.sum_(tn.matmul(a, Bm)), A)
    expect = np.broadcast_to(Bm.sum(1), (3, 4))
    assert np.allclose(g, expect, atol=1e-12)
    assert np.allclose(g, fd_grad(lambda a: (a @ Bm).sum(), A), atol=1e-6)


def test_reductions():
    assert np.array_equal(tn.mean(Tensor([[1.0, 3.0]]), [1]).data, [2.0])
    assert tn.norm2(Tensor([3.0, 4.0]), [0]).item() == 5.0
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 9))
    got = tn.reduce("min", Tensor(x), [1]).data
    for n in range(5):
        best = x[n, 0]
        for v in x[n, 1:]:
            best = v if v < best else best
        assert got[n] == best


def test_softmax_examples():
    assert np.allclose(tn.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    a = tn.softmax(Tensor([1.0, 2.0, 3.0])).data
    b = tn.softmax(Tensor([101.0, 102.0, 103.0])).data
    e = np.exp([1.0, 2.0, 3.0])
    assert np.allclose(a, e / e.sum(), atol=1e-15)
    assert np.allclose(a, b, atol=1e-15)
    assert np.allclose(tn.softmax(Tensor([4.0, 4.0, 4.0])).data, 1 / 3)


def test_softmax_masked_rows():
    out = tn.softmax(Tensor([[1.0, 2.0], [3.0, 4.0]]), -1, mask=np.array([[True, False], [False, False]])).data
    assert np.array_equal(out, [[1.0, 0.0], [0.0, 0.0]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_sums_to_one(vals):
    assert abs(tn.softmax(Tensor(vals)).data.sum() - 1.0) <= 1e-12


def test_layer_norm_concat_slice():
    out = tn.layer_norm(Tensor([1.0, 1.0, 1.0])).data
    assert np.all(np.isfinite(out)) and np.allclose(out, 0.0)
    c = tn.concat([Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 1)))], 1)
    assert c.shape == (2, 4)
    x = Tensor(np.arange(12.0).reshape(3, 4))
    back = tn.concat([tn.slice_(x, 1, 0, 1), tn.slice_(x, 1, 1, 4)], 1)
    assert np.array_equal(back.data, x.data)


def test_backward_basics():
    x = Tensor(3.0, requires_grad=True)
    assert tn.backward(x * x)[x] == 6.0
    y = Tensor(1.5, requires_grad=True)
    assert tn.backward(y + y)[y] == 2.0


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(tn.ShapeError):
        tn.backward(x * 2.0)


def test_backward_is_deterministic():
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(4, 6))

    def f(x):
        h = tn.sigmoid(tn.matmul(x, x0.T)) * tn.cos(x[:, :4])
        return tn.sum_(tn.softmax(h, -1) * h) + tn.mean(tn.absolute(x))

    _, (g1,) = tn.grad(f, x0)
    _, (g2,) = tn.grad(f, x0)
    assert np.array_equal(g1, g2)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with tn.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_grad_check_sum_is_exact():
    assert tn.grad_check(lambda x: tn.sum_(x), np.random.default_rng(0).normal(size=7)) < 1e-8


def test_clip_subgradient_is_zero_at_boundary():
    _, (g,) = tn.grad(lambda x: tn.sum_(tn.clip_min(x, 0.0)), np.array([0.0, 1.0, -1.0]))
    assert np.array_equal(g, [0.0, 1.0, 0.0])


UNARY = {
    "neg": tn.neg, "abs": tn.absolute, "sin": tn.sin, "cos": tn.cos, "sqrt": tn.sqrt, "sigmoid": tn.sigmoid,
    "exp": tn.exp, "log": tn.log, "tanh": tn.tanh,
    "clip_min": lambda a: tn.clip_min(a, 0.3), "clip_max": lambda a: tn.clip_max(a, 0.3),
    "wrap": tn.wrap_angle,
}
BINARY = {
    "add": tn.add, "sub": tn.sub, "mul": tn.mul, "div": tn.div, "pow": tn.power,
    "minimum": tn.minimum, "maximum": tn.maximum, "fmod": tn.fmod,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    rng = np.random.default_rng(abs(hash(name)) % 1000)
    x = rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    if name in ("sqrt", "log"):
        x = np.abs(x)
    if name.startswith("clip"):
        x = x + np.where(np.abs(x - 0.3) < 0.05, 0.2, 0.0)  # keep off the kink
    assert tn.grad_check(lambda t: tn.sum_(UNARY[name](t) * np.arange(1.0, 13.0).reshape(3, 4)), x) < 1e-6


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name):
    rng = np.random.default_rng(abs(hash(name)) % 1000)
    a = rng.uniform(0.5, 2.0, size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(4,))
    if name in ("minimum", "maximum"):
        b = b + 3.0 * (np.arange(4) % 2)  # no ties
    if name == "fmod":
        b = np.full(4, 0.7)
        a = a + np.where(np.abs(np.fmod(a, 0.7)) < 0.05, 0.1, 0.0)
    w = np.arange(1.0, 13.0).reshape(3, 4)
    assert tn.grad_check(lambda t: tn.sum_(BINARY[name](t, b) * w), a) < 1e-6
    assert tn.grad_check(lambda t: tn.sum_(BINARY[name](a, t) * w), b) < 1e-6


def test_structural_gradients():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(2, 3, 4))
    cases = [
        lambda t: tn.sum_(tn.softmax(t, -1) * w),
        lambda t: tn.sum_(tn.layer_norm(t) * w),
        lambda t: tn.sum_(tn.reduce("max", t, [2]) * w[..., 0]),
        lambda t: tn.sum_(tn.softmin(t, 1) * w[:, 0]),
        lambda t: tn.sum_(tn.norm2(t, -1)),
        lambda t: tn.sum_(tn.concat([t, t[..., :2]], -1) * np.concatenate([w, w[..., :2]], -1)),
        lambda t: tn.sum_(tn.stack([t[0], t[1] * 2.0], 0) * w),
        lambda t: tn.sum_(tn.unsqueeze(tn.squeeze(t[:, :1], 1), 0) * w[None, :, 0]),
        lambda t: tn.sum_(t.transpose(2, 0, 1).reshape(4, 6) * w.reshape(4, 6)),
    ]
    for f in cases:
        assert tn.grad_check(f, x) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.sampled_from([1, 2, 3]), min_size=0, max_size=3), min_size=3, max_size=3))
def test_broadcast_shape_is_associative(shapes):
    a, b, c = (tuple(s) for s in shapes)
    try:
        left = tn.broadcast_shape(tn.broadcast_shape(a, b), c)
    except tn.ShapeError:
        left = None
    try:
        right = tn.broadcast_shape(a, tn.broadcast_shape(b, c))
    except tn.ShapeError:
        right = None
    assert left == right
