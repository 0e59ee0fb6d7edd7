import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flexsep.numerics import (
    ComputationRecord, ContractError, NonFiniteError, ShapeError, Tensor, backward, check_gradients,
    kernels, no_grad, ops, set_finite_checks,
)


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# -- oracles -----------------------------------------------------------------------

def matmul_loops(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def conv1d_loops(x, w, stride):
    cin, t = x.shape
    cout, _, k = w.shape
    length = (t - k) // stride + 1
    out = np.zeros((cout, length))
    for c in range(cout):
        for l in range(length):
            for i in range(cin):
                for j in range(k):
                    out[c, l] += x[i, l * stride + j] * w[c, i, j]
    return out


def depthwise_loops(x, w):
    c, t = x.shape
    kd = w.shape[1]
    half = kd // 2
    out = np.zeros_like(x)
    for ch in range(c):
        for n in range(t):
            for j in range(kd):
                src = n + j - half
                if 0 <= src < t:
                    out[ch, n] += x[ch, src] * w[ch, j]
    return out


def layer_norm_two_pass(x, gamma, beta, eps=1e-5):
    mu = np.array([sum(row) / len(row) for row in x])
    var = np.array([sum((v - m) ** 2 for v in row) / len(row) for row, m in zip(x, mu)])
    return (x - mu[:, None]) / np.sqrt(var[:, None] + eps) * gamma + beta


def attention_loops(q, k, v, scale):
    lq, lk = q.shape[0], k.shape[0]
    out = np.zeros((lq, v.shape[1]))
    for i in range(lq):
        s = np.array([scale * sum(q[i, t] * k[j, t] for t in range(q.shape[1])) for j in range(lk)])
        e = np.exp(s - s.max())
        w = e / e.sum()
        for j in range(lk):
            out[i] += w[j] * v[j]
    return out


# -- matmul ------------------------------------------------------------------------

def test_matmul_identity_left():
    a = np.array([[2.0, -1.0], [0.5, 3.0]])
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_matmul_hand_example():
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.max(np.abs(ops.matmul(Tensor(a), Tensor(b)).data - matmul_loops(a, b))) < 1e-12


def test_matmul_inner_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- conv1d / transpose --------------------------------------------------------------

def test_conv1d_output_length():
    out = ops.conv1d(Tensor(np.ones((1, 32))), Tensor(np.ones((1, 1, 16))), stride=8)
    assert out.shape == (1, 3)


def test_conv1d_delta_kernel_copies_prefix(rng):
    x = rng.normal(size=(1, 20))
    w = np.zeros((1, 1, 5))
    w[0, 0, 0] = 1.0
    out = ops.conv1d(Tensor(x), Tensor(w), stride=1)
    np.testing.assert_array_equal(out.data[0], x[0, :16])


def test_conv1d_matches_nested_sum(rng):
    x, w = rng.normal(size=(3, 29)), rng.normal(size=(4, 3, 5))
    for stride in (1, 2, 3):
        got = ops.conv1d(Tensor(x), Tensor(w), stride=stride).data
        assert np.max(np.abs(got - conv1d_loops(x, w, stride))) < 1e-12


def test_conv1d_too_short_input():
    with pytest.raises(ContractError, match="too short"):
        ops.conv1d(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 1, 16))), stride=8)


def test_conv1d_transpose_length():
    out = ops.conv1d_transpose(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 1, 16))), stride=8)
    assert out.shape == (1, 32)


def test_conv1d_transpose_is_adjoint(rng):
    x = rng.normal(size=(2, 3, 38))          # (9 - 1) * 4 + 6 samples
    w = rng.normal(size=(5, 3, 6))
    y = rng.normal(size=(2, 5, 9))
    lhs = np.sum(ops.conv1d(Tensor(x), Tensor(w), stride=4).data * y)
    # same array read as [Cin=5, Cout=3, K]: the transposed operator
    rhs = np.sum(x * ops.conv1d_transpose(Tensor(y), Tensor(w), stride=4).data)
    assert abs(lhs - rhs) < 1e-10


def test_conv1d_transpose_single_frame_is_scaled_kernel(rng):
    w = rng.normal(size=(1, 1, 16))
    out = ops.conv1d_transpose(Tensor([[2.5]]), Tensor(w), stride=8)
    np.testing.assert_allclose(out.data[0], 2.5 * w[0, 0], rtol=0, atol=1e-15)


# -- depthwise ---------------------------------------------------------------------

def test_depthwise_delta_is_identity(rng):
    x = rng.normal(size=(3, 11))
    w = np.zeros((3, 5))
    w[:, 2] = 1.0
    np.testing.assert_array_equal(ops.depthwise_conv1d(Tensor(x), Tensor(w)).data, x)


def test_depthwise_constant_interior():
    w = np.array([[0.5, 1.0, 1.5], [1.0, -1.0, 2.0]])
    out = ops.depthwise_conv1d(Tensor(np.full((2, 9), 2.0)), Tensor(w)).data
    expected = np.broadcast_to(2.0 * w.sum(axis=1)[:, None], (2, 7))
    np.testing.assert_allclose(out[:, 1:-1], expected, atol=1e-14)


def test_depthwise_matches_nested_sum(rng):
    x, w = rng.normal(size=(4, 13)), rng.normal(size=(4, 7))
    assert np.max(np.abs(ops.depthwise_conv1d(Tensor(x), Tensor(w)).data - depthwise_loops(x, w))) < 1e-12


def test_depthwise_even_kernel_rejected():
    with pytest.raises(ContractError, match="odd"):
        ops.depthwise_conv1d(Tensor(np.ones((2, 8))), Tensor(np.ones((2, 4))))


# -- softmax / layer norm / activations ------------------------------------------------

def test_softmax_closed_forms():
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, math.log(2.0)])).data, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(4, 6))
    diff = ops.softmax(Tensor(x + 17.3)).data - ops.softmax(Tensor(x)).data
    assert np.max(np.abs(diff)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    p = ops.softmax(Tensor(x), axis=-1).data
    assert np.all(p >= 0)
    assert np.max(np.abs(p.sum(axis=-1) - 1.0)) < 1e-6


def test_layer_norm_constant_and_normalized():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(ops.layer_norm(Tensor(np.full((1, 4), 3.0)), g, b).data, np.zeros((1, 4)))
    out = ops.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    # eps keeps the result a hair below unit magnitude
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_matches_two_pass(rng):
    x = rng.normal(3.0, 2.0, size=(5, 9))
    g, b = rng.normal(size=9), rng.normal(size=9)
    got = ops.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    assert np.max(np.abs(got - layer_norm_two_pass(x, g, b))) < 1e-10


def test_activation_reference_points():
    assert ops.gelu(Tensor([0.0])).data[0] == 0.0
    assert ops.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert abs(ops.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6


def test_gelu_matches_erf_series():
    # Maclaurin series of erf, summed to convergence in double precision
    z = 1.0 / math.sqrt(2.0)
    series = 2.0 / math.sqrt(math.pi) * sum((-1) ** n * z ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
                                            for n in range(30))
    expected = 0.5 * (1.0 + series)
    assert abs(ops.gelu(Tensor([1.0])).data[0] - expected) < 1e-9


# -- autodiff ----------------------------------------------------------------------

def test_backward_square():
    w = Tensor([3.0], requires_grad=True)
    backward(ops.sum(w * w))
    assert w.grad[0] == pytest.approx(6.0)


def test_backward_softmax_sum_is_flat(rng):
    w = leaf(rng, 5)
    backward(ops.sum(ops.softmax(w)))
    assert np.max(np.abs(w.grad)) < 1e-15


def test_backward_rejects_non_scalar(rng):
    w = leaf(rng, 3)
    with pytest.raises(ContractError, match="scalar"):
        backward(w * 2.0)


def test_record_is_topological_and_visits_each_op_once(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 3, 2)
    h = ops.matmul(a, b)
    loss = ops.sum(h * h + h)
    rec = ComputationRecord.build(loss)
    pos = {id(n): i for i, n in enumerate(rec.nodes)}
    assert len(pos) == len(rec.nodes)
    for n in rec.nodes:
        for p in n._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(n)]
    assert rec.nodes[-1] is loss


def test_no_grad_builds_no_graph(rng):
    w = leaf(rng, 3)
    with no_grad():
        out = ops.sum(w * 2.0)
    assert not out.requires_grad and out._parents == ()


def test_non_finite_output_is_an_error():
    set_finite_checks(True)
    try:
        with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
            ops.log(Tensor([-1.0]))
    finally:
        set_finite_checks(False)


PRIMITIVES = {
    "add": lambda r: ((leaf(r, 2, 3), leaf(r, 3)), lambda a, b: a + b),
    "sub": lambda r: ((leaf(r, 2, 3), leaf(r, 2, 3)), lambda a, b: a - b),
    "mul": lambda r: ((leaf(r, 2, 3), leaf(r, 1, 3)), lambda a, b: a * b),
    "div": lambda r: ((leaf(r, 2, 3), Tensor(r.uniform(1, 2, (2, 3)), requires_grad=True)), lambda a, b: a / b),
    "exp": lambda r: ((leaf(r, 5),), ops.exp),
    "log": lambda r: ((Tensor(r.uniform(0.5, 2, 5), requires_grad=True),), ops.log),
    "sqrt": lambda r: ((Tensor(r.uniform(0.5, 2, 5), requires_grad=True),), ops.sqrt),
    "power": lambda r: ((Tensor(r.uniform(0.5, 2, 5), requires_grad=True),), lambda a: ops.power(a, 2.5)),
    "sigmoid": lambda r: ((leaf(r, 6),), ops.sigmoid),
    "tanh": lambda r: ((leaf(r, 6),), ops.tanh),
    "gelu": lambda r: ((leaf(r, 8),), ops.gelu),
    "relu": lambda r: ((Tensor(np.array([-1.5, -0.3, 0.4, 2.0]), requires_grad=True),), ops.relu),
    "matmul": lambda r: ((leaf(r, 2, 3), leaf(r, 3, 2)), ops.matmul),
    "matmul_batched": lambda r: ((leaf(r, 2, 2, 3), leaf(r, 3, 2)), ops.matmul),
    "linear": lambda r: ((leaf(r, 2, 3), leaf(r, 3, 2), leaf(r, 2)), ops.linear),
    "conv1d": lambda r: ((leaf(r, 2, 8), leaf(r, 2, 2, 3)), lambda x, w: ops.conv1d(x, w, stride=2)),
    "conv1d_dilated": lambda r: ((leaf(r, 1, 2, 7), leaf(r, 2, 2, 3), leaf(r, 2)),
                                 lambda x, w, b: ops.conv1d(x, w, b, padding=2, dilation=2)),
    "conv1d_transpose": lambda r: ((leaf(r, 2, 3), leaf(r, 2, 2, 4)),
                                   lambda y, w: ops.conv1d_transpose(y, w, stride=2)),
    "depthwise_conv1d": lambda r: ((leaf(r, 2, 6), leaf(r, 2, 3), leaf(r, 2)), ops.depthwise_conv1d),
    "layer_norm": lambda r: ((leaf(r, 2, 4), leaf(r, 4), leaf(r, 4)), ops.layer_norm),
    "softmax": lambda r: ((leaf(r, 2, 4),), ops.softmax),
    "softmax_axis0": lambda r: ((leaf(r, 3, 2),), lambda a: ops.softmax(a, axis=0)),
    "attention": lambda r: ((leaf(r, 3, 2), leaf(r, 4, 2), leaf(r, 4, 2)), ops.scaled_dot_product_attention),
    "max_pool1d": lambda r: ((Tensor(np.arange(8.0).reshape(1, 8) * np.array([1, -1] * 4) + r.uniform(0, .1, 8),
                                     requires_grad=True),), lambda a: ops.max_pool1d(a, 4)),
    "mean": lambda r: ((leaf(r, 2, 4),), lambda a: ops.mean(a, axis=1)),
    "reshape_transpose": lambda r: ((leaf(r, 2, 3),), lambda a: ops.transpose(a.reshape(3, 2))),
    "getitem": lambda r: ((leaf(r, 4, 2),), lambda a: a[1:3, :1]),
    "concat_stack": lambda r: ((leaf(r, 2), leaf(r, 3)),
                               lambda a, b: ops.stack([ops.concat([a, b]), ops.concat([b, a])])),
    "pad": lambda r: ((leaf(r, 2, 3),), lambda a: ops.pad(a, [(1, 0), (0, 2)])),
    "clip": lambda r: ((Tensor(np.array([-2.0, -0.5, 0.3, 1.7]), requires_grad=True),), lambda a: ops.clip(a, -1, 1)),
    "abs": lambda r: ((Tensor(np.array([-2.0, -0.5, 0.3, 1.7]), requires_grad=True),), ops.abs),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient(name, rng):
    inputs, fn = PRIMITIVES[name](rng)
    weights = Tensor(rng.normal(size=fn(*inputs).shape))
    errors = check_gradients(lambda: ops.sum(fn(*inputs) * weights), list(inputs))
    assert max(errors.values()) < 1e-3, errors


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4))
def test_matmul_gradient_property(m, k, n):
    r = np.random.default_rng(m * 100 + k * 10 + n)
    a, b = leaf(r, m, k), leaf(r, k, n)
    errors = check_gradients(lambda: ops.sum(ops.matmul(a, b) ** 2.0), [a, b])
    assert max(errors.values()) < 1e-3


# -- attention ---------------------------------------------------------------------

def test_attention_matches_loop_oracle(rng):
    q, k, v = rng.normal(size=(3, 2)), rng.normal(size=(5, 2)), rng.normal(size=(5, 3))
    got = ops.scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v)).data
    assert np.max(np.abs(got - attention_loops(q, k, v, 1 / math.sqrt(2)))) < 1e-12


def test_long_sequence_attention_agrees_with_short_path(rng, monkeypatch):
    q, k, v = (Tensor(rng.normal(size=(2, 600, 4)), requires_grad=True) for _ in range(3))
    g = rng.normal(size=(2, 600, 4))
    blocked = ops.scaled_dot_product_attention(q, k, v)
    backward(blocked, g)
    grads = [t.grad.copy() for t in (q, k, v)]
    for t in (q, k, v):
        t.grad = None
    monkeypatch.setattr(ops, "_BLOCK_MIN_KEYS", 10 ** 9)
    full = ops.scaled_dot_product_attention(q, k, v)
    backward(full, g)
    assert np.max(np.abs(blocked.data - full.data)) < 1e-12
    for a, t in zip(grads, (q, k, v)):
        assert np.max(np.abs(a - t.grad)) < 1e-12


def test_blocked_attention_gradient(rng, monkeypatch):
    monkeypatch.setattr(ops, "_BLOCK_MIN_KEYS", 4)
    monkeypatch.setattr(ops, "_BLOCK_SCORES", 10)
    q, k, v = leaf(rng, 2, 5, 3), leaf(rng, 2, 5, 3), leaf(rng, 2, 5, 3)
    w = Tensor(rng.normal(size=(2, 5, 3)))
    errors = check_gradients(lambda: ops.sum(ops.scaled_dot_product_attention(q, k, v) * w), [q, k, v])
    assert max(errors.values()) < 1e-3


# -- kernel backends ---------------------------------------------------------------

@pytest.mark.skipif("numba" not in kernels.available_backends(), reason="numba unavailable")
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_backends_agree(rng, dtype):
    tol = 1e-12 if dtype == np.float64 else 1e-5
    x = rng.normal(size=(2, 3, 40)).astype(dtype)
    w = rng.normal(size=(4, 3, 5)).astype(dtype)
    dw = rng.normal(size=(3, 7)).astype(dtype)
    ln = rng.normal(size=(6, 9)).astype(dtype)
    results = {}
    for name in ("numpy", "numba"):
        with kernels.use_backend(name):
            xs = [Tensor(x, requires_grad=True), Tensor(w, requires_grad=True), Tensor(dw, requires_grad=True),
                  Tensor(ln, requires_grad=True)]
            out = ops.conv1d(xs[0], xs[1], stride=2, dilation=2)
            loss = ops.sum(out * out)
            loss = loss + ops.sum(ops.depthwise_conv1d(xs[0], xs[2]) ** 2.0)
            loss = loss + ops.sum(ops.gelu(ops.layer_norm(xs[3], Tensor(np.ones(9, dtype)), Tensor(np.zeros(9, dtype)))))
            loss = loss + ops.sum(ops.softmax(xs[3]) * Tensor(ln))
            loss = loss + ops.sum(ops.max_pool1d(xs[0], 4) ** 2.0)
            loss = loss + ops.sum(ops.conv1d_transpose(out, xs[1], stride=2))
            backward(loss)
            results[name] = [loss.data] + [t.grad for t in xs]
    for a, b in zip(results["numpy"], results["numba"]):
        scale = max(1.0, float(np.max(np.abs(a))))
        assert np.max(np.abs(a - b)) / scale < tol


def test_unknown_backend_rejected():
    with pytest.raises(ValueError, match="unknown kernel backend"):
        kernels.set_backend("fortran")
