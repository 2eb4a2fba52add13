import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stno.autograd import (
    ContractError, DimensionError, NonFiniteError, Tape, Tensor, bilinear_resize, bilinear_warp,
    charbonnier, concat, conv2d, grad_check, layer_norm, leaky_relu, matmul, pointwise, relu,
    sigmoid, take_rows, transpose,
)


def t64(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape).astype(np.float64))


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_hand_case():
    b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(matmul(Tensor(np.eye(2)), b).data, b.data)
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = matmul(a, Tensor(np.array([[0.0], [1.0]])))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_5x7x3():
    rng = np.random.default_rng(0)
    rep = grad_check(lambda a, b: (matmul(a, b) * matmul(a, b)).sum(), [t64(rng, 5, 7), t64(rng, 7, 3)])
    assert rep.max_rel_err < 1e-6


def test_matmul_scalar_associativity():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 5))
    lhs = matmul(Tensor(3.7 * a), Tensor(b)).data
    rhs = 3.7 * matmul(Tensor(a), Tensor(b)).data
    assert np.allclose(lhs, rhs, rtol=1e-6, atol=0)


# ---------------------------------------------------------------- conv2d


def test_conv_1x1_identity():
    x = Tensor(np.random.default_rng(2).normal(size=(1, 5, 6)))
    out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))), stride=1)
    assert np.array_equal(out.data, x.data)


def test_conv_box_sum_on_constant():
    x = Tensor(np.full((1, 6, 6), 0.25))
    out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))))
    assert np.allclose(out.data[0, 1:-1, 1:-1], 9 * 0.25)
    assert out.data[0, 0, 0] == pytest.approx(4 * 0.25)  # zero padding at the corner


def test_conv_stride2_shape():
    out = conv2d(Tensor(np.zeros((2, 8, 8))), Tensor(np.zeros((3, 2, 3, 3))), stride=2, pad=1)
    assert out.shape == (3, 4, 4)


def test_conv_errors():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), pad=0)
    with pytest.raises(ContractError):
        conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_matches_scalar_loop():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    for stride in (1, 2):
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ho, wo = (7 + 2 - 3) // stride + 1, (6 + 2 - 3) // stride + 1
        ref = np.zeros((3, ho, wo))
        for o in range(3):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    ref[o, i, j] = (patch * w[o]).sum() + b[o]
        assert np.allclose(out, ref, atol=1e-12)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_cases():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert np.array_equal(layer_norm(Tensor(np.zeros((3, 2))), one, zero).data, np.zeros((3, 2)))
    out = layer_norm(Tensor(np.array([[1.0, 3.0]])), one, zero, eps=1e-12).data
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-9)
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.zeros((3, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


def test_layer_norm_statistics():
    x = Tensor(np.random.default_rng(4).normal(2.0, 3.0, size=(16, 8)))
    out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.abs(out.mean(axis=1)).max() < 1e-6
    assert np.abs(out.var(axis=1) - 1).max() < 1e-4


# ---------------------------------------------------------------- warping / resizing


def test_warp_zero_flow_is_identity():
    f = np.random.default_rng(5).normal(size=(2, 3, 5, 6))
    out = bilinear_warp(Tensor(f), Tensor(np.zeros((2, 2, 5, 6)))).data
    assert np.array_equal(out, f)


def test_warp_ramp_shift():
    h, w = 4, 7
    ramp = np.tile(np.arange(w, dtype=np.float64), (h, 1))[None]
    flow = np.zeros((2, h, w))
    flow[0] = 1.0
    out = bilinear_warp(Tensor(ramp), Tensor(flow)).data[0]
    # scalar reference: sample x+1 with clamping at the right border
    ref = np.array([[min(x + 1, w - 1) for x in range(w)] for _ in range(h)], dtype=float)
    assert np.array_equal(out, ref)
    assert np.array_equal(out[:, :-1], ramp[0][:, :-1] + 1)


def test_warp_matches_scalar_bilinear():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(1, 5, 6))
    flow = rng.uniform(-2, 2, size=(2, 5, 6))
    out = bilinear_warp(Tensor(f), Tensor(flow)).data[0]
    for i in range(5):
        for j in range(6):
            x = np.clip(j + flow[0, i, j], 0, 5)
            y = np.clip(i + flow[1, i, j], 0, 4)
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            x1, y1 = min(x0 + 1, 5), min(y0 + 1, 4)
            ax, ay = x - x0, y - y0
            v = (f[0, y0, x0] * (1 - ax) * (1 - ay) + f[0, y0, x1] * ax * (1 - ay)
                 + f[0, y1, x0] * (1 - ax) * ay + f[0, y1, x1] * ax * ay)
            assert out[i, j] == pytest.approx(v, abs=1e-12)


def _non_integer_flow(rng, shape, margin=1e-3):
    flow = rng.uniform(-1.5, 1.5, size=shape)
    frac = flow - np.round(flow)
    flow[np.abs(frac) < margin] += 0.25
    return flow


@pytest.mark.parametrize("seed", range(3))
def test_warp_gradients(seed):
    rng = np.random.default_rng(seed)
    feat = t64(rng, 2, 2, 5, 5)
    flow = Tensor(_non_integer_flow(rng, (2, 2, 5, 5)))
    wts = rng.normal(size=(2, 2, 5, 5))
    rep = grad_check(lambda f, fl: (bilinear_warp(f, fl) * Tensor(wts)).sum(), [feat, flow])
    assert rep.max_rel_err < 1e-4, rep


def test_resize_cases():
    x = Tensor(np.random.default_rng(7).normal(size=(2, 5, 4)))
    assert np.array_equal(bilinear_resize(x, 1.0).data, x.data)
    const = Tensor(np.full((1, 4, 8), 0.3))
    for s in (0.25, 0.5, 1.5, 2.0, 3.7, 8.0):
        out = bilinear_resize(const, s).data
        assert np.abs(out - 0.3).max() < 1e-6
    with pytest.raises(DimensionError):
        bilinear_resize(Tensor(np.zeros((1, 2, 2))), 0.2)


def test_resize_half_pixel_columns():
    img = Tensor(np.array([[[0.0, 1.0], [0.0, 1.0]]]))
    out = bilinear_resize(img, 2.0).data[0]
    # scalar reference: src = (i + 0.5) / 2 - 0.5, clamped to [0, 1]
    ref_row = [np.clip((j + 0.5) / 2 - 0.5, 0, 1) for j in range(4)]
    assert np.allclose(out, np.tile(ref_row, (4, 1)))
    assert np.allclose(ref_row, [0.0, 0.25, 0.75, 1.0])


# ---------------------------------------------------------------- pointwise / charbonnier


def test_pointwise_values():
    assert np.array_equal(relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])
    assert leaky_relu(Tensor(np.array([-10.0]))).data[0] == pytest.approx(-1.0)
    assert sigmoid(Tensor(np.array([0.0]))).data[0] == 0.5
    with pytest.raises(DimensionError):
        pointwise(Tensor(np.ones((2, 3))), "add", Tensor(np.ones((2, 4))))


def test_pointwise_broadcast_over_leading_axes():
    x, b = Tensor(np.ones((4, 3, 2))), Tensor(np.arange(2.0))
    assert pointwise(x, "add", b).shape == (4, 3, 2)


def test_charbonnier_values():
    eps = 1e-3
    x = Tensor(np.ones((3, 4)))
    assert charbonnier(x, x, eps).item() == pytest.approx(eps, rel=1e-12)
    assert charbonnier(Tensor(np.array([3.0])), np.array([0.0]), eps).item() == pytest.approx(
        np.sqrt(9 + 1e-6), rel=1e-12)
    assert charbonnier(Tensor(np.array([3.0])), np.array([0.0]), eps).item() == pytest.approx(3.00000017, abs=1e-8)
    p = Tensor(np.ones(5), requires_grad=True)
    with Tape() as tape:
        loss = charbonnier(p, np.ones(5), eps)
    tape.backward(loss)
    assert np.array_equal(p.grad, np.zeros(5))
    with pytest.raises(DimensionError):
        charbonnier(Tensor(np.ones(3)), np.ones(4))


def test_charbonnier_gradient_away_from_zero():
    rng = np.random.default_rng(8)
    target = rng.normal(size=(4, 5))
    pred = Tensor(target + rng.choice([-1, 1], size=(4, 5)) * rng.uniform(0.1, 1, size=(4, 5)))
    rep = grad_check(lambda p: charbonnier(p, target, 1e-3), [pred])
    assert rep.max_rel_err < 1e-5


# ---------------------------------------------------------------- backward contract


def test_backward_simple_losses():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones(3))
    x.grad = None
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_and_requires_scalar():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    tape.backward(loss)
    assert np.array_equal(x.grad, [2.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_ops_outside_tape_record_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 3.0
    assert not y.requires_grad and y.is_leaf


def test_tape_topological_order():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        a = x * 2.0
        b = matmul(a, x)
        b.sum()
    produced = set()
    for out, inputs, _ in tape.entries:
        for t in inputs:
            assert t.is_leaf or id(t) in produced
        produced.add(id(out))


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0])) * np.inf


def test_mlp_composite_gradient():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(6, 4))
    w1, b1, w2 = t64(rng, 4, 8), t64(rng, 8), t64(rng, 8, 1)
    target = rng.normal(size=(6, 1))

    def f(w1, b1, w2):
        h = leaky_relu(matmul(Tensor(x), w1) + b1)
        return charbonnier(matmul(h, w2), target, 1e-3)

    assert grad_check(f, [w1, b1, w2]).max_rel_err < 1e-4


# ---------------------------------------------------------------- every op, ten seeds


def _op_cases(rng):
    w = rng.normal(size=(2, 3, 4, 4))
    wm = rng.normal(size=(3, 2))
    yield "matmul", lambda a, b: (matmul(a, b) * Tensor(wm)).sum(), \
        [t64(rng, 3, 4), t64(rng, 4, 2)]
    yield "conv_s1", lambda x, k, b: (conv2d(x, k, b) * Tensor(w)).sum(), \
        [t64(rng, 2, 4, 4), t64(rng, 3, 2, 3, 3), t64(rng, 3)]
    w2 = rng.normal(size=(1, 3, 3, 3))
    yield "conv_s2", lambda x, k: (conv2d(x, k, stride=2) * Tensor(w2)).sum(), \
        [t64(rng, 1, 2, 6, 6), t64(rng, 3, 2, 3, 3)]
    wl = rng.normal(size=(4, 5))
    yield "layer_norm", lambda x, g, b: (layer_norm(x, g, b) * Tensor(wl)).sum(), \
        [t64(rng, 4, 5), t64(rng, 5), t64(rng, 5)]
    wr = rng.normal(size=(2, 5, 7))
    yield "resize", lambda x: (bilinear_resize(x, 1.75) * Tensor(wr)).sum(), [t64(rng, 2, 3, 4)]
    ww = rng.normal(size=(2, 4, 4))
    yield "warp", lambda f, fl: (bilinear_warp(f, fl) * Tensor(ww)).sum(), \
        [t64(rng, 2, 4, 4), Tensor(_non_integer_flow(rng, (2, 4, 4)))]
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 1e-2] = 0.5
    wp = rng.normal(size=(3, 4))
    for op in ("relu", "leaky_relu", "sigmoid"):
        yield op, (lambda op: lambda a: (pointwise(a, op) * Tensor(wp)).sum())(op), [Tensor(x.copy())]
    for op in ("add", "sub", "mul"):
        yield op, (lambda op: lambda a, b: (pointwise(a, op, b) * Tensor(wp)).sum())(op), \
            [t64(rng, 3, 4), t64(rng, 4)]
    yield "scale", lambda a: (pointwise(a, "scale", c=-2.5) * Tensor(wp)).sum(), [t64(rng, 3, 4)]
    yield "charbonnier", lambda p: charbonnier(p, wp, 1e-3), [t64(rng, 3, 4)]
    idx = rng.integers(0, 5, size=(2, 7))
    wt = rng.normal(size=(2, 7, 3))
    yield "take_rows", lambda a: (take_rows(a, idx) * Tensor(wt)).sum(), [t64(rng, 2, 5, 3)]
    wc = rng.normal(size=(5, 2))
    yield "concat_transpose", lambda a, b: (transpose(concat([a, b], 1), (1, 0)) * Tensor(wc)).sum(), \
        [t64(rng, 2, 2), t64(rng, 2, 3)]


@pytest.mark.parametrize("seed", range(10))
def test_every_op_gradient(seed):
    rng = np.random.default_rng(100 + seed)
    for name, f, inputs in _op_cases(rng):
        rep = grad_check(f, inputs, tol=1e-4)
        assert rep.passed, (name, rep)


def test_corrupted_backward_rule_fails():
    from stno.autograd.tensor import make_result

    def bad_square(x):
        return make_result(x.data ** 2, (x,), lambda g: (g * 3.0 * x.data,))

    rep = grad_check(lambda a: bad_square(a).sum(), [t64(np.random.default_rng(0), 4)])
    assert not rep.passed


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.25, 8.0))
def test_resize_preserves_constants(h, w, s):
    if np.floor(s * h + 1e-9) < 1 or np.floor(s * w + 1e-9) < 1:
        return
    out = bilinear_resize(Tensor(np.full((1, h, w), -1.25)), s).data
    assert np.abs(out + 1.25).max() < 1e-6
