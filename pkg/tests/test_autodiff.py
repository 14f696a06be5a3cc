import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from concept_saliency.autodiff import BackpropRule, Tensor, backward, forward, grad_check, relu_backward
from concept_saliency.autodiff import ops
from concept_saliency.autodiff.ops import BatchNormState
from concept_saliency.errors import GraphError, ShapeError

F64 = np.float64
VANILLA = BackpropRule.vanilla()
GUIDED = BackpropRule.guided()


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad)


def brute_conv(x, w, b, stride, pad):
    """Direct loop over every output position and kernel tap."""
    n, h, wd, c = x.shape
    k, _, _, f = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, f))
    for ni in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(f):
                    patch = xp[ni, i * stride:i * stride + k, j * stride:j * stride + k, :]
                    out[ni, i, j, o] = (patch * w[:, :, :, o]).sum() + b[o]
    return out


def brute_conv_transpose(y, w, b, stride, pad, out_hw):
    """Each input pixel stamps kernel * value onto the (padded) output."""
    n, h, wd, cin = y.shape
    k, _, cout, _ = w.shape
    full = np.zeros((n, (h - 1) * stride + k + stride, (wd - 1) * stride + k + stride, cout))
    for ni in range(n):
        for i in range(h):
            for j in range(wd):
                for c in range(cin):
                    full[ni, i * stride:i * stride + k, j * stride:j * stride + k, :] += y[ni, i, j, c] * w[:, :, :, c]
    return full[:, pad:pad + out_hw[0], pad:pad + out_hw[1], :] + b


# -- forward -------------------------------------------------------------------

def test_dense_matrix_vector():
    out = forward(ops.dense(T([[1, 1]]), T([[1, 3], [2, 4]]), T([0, 0])))
    # w=[[1,2],[3,4]] acting on x=[1,1]: stored (in, out) so the kernel is its transpose
    np.testing.assert_array_equal(out.values, [[3, 7]])


def test_relu_forward():
    np.testing.assert_array_equal(forward(ops.relu(T([-1, 0, 2]))).values, [0, 0, 2])


def test_conv_window_sums():
    x = np.arange(16, dtype=F64).reshape(1, 4, 4, 1)
    out = forward(ops.conv2d(T(x), T(np.ones((2, 2, 1, 1))), T([0.0]), stride=2)).values
    expected = brute_conv(x, np.ones((2, 2, 1, 1)), np.zeros(1), 2, 0)
    np.testing.assert_array_equal(out, expected)
    np.testing.assert_array_equal(out[0, :, :, 0], [[10, 18], [42, 50]])


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (4, 2, 1), (5, 2, 2), (2, 2, 0)])
def test_conv_matches_brute_force(k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.normal(size=(2, 8, 8, 3))
    w = rng.normal(size=(k, k, 3, 4))
    b = rng.normal(size=4)
    out = forward(ops.conv2d(T(x), T(w), T(b), stride, pad)).values
    np.testing.assert_allclose(out, brute_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k,stride,pad,outpad", [(4, 2, 1, 0), (5, 2, 2, 1), (3, 1, 1, 0)])
def test_conv_transpose_matches_brute_force(k, stride, pad, outpad):
    rng = np.random.default_rng(k)
    y = rng.normal(size=(2, 4, 4, 3))
    w = rng.normal(size=(k, k, 2, 3))
    b = rng.normal(size=2)
    node = ops.conv2d_transpose(T(y), T(w), T(b), stride, pad, outpad)
    out = forward(node).values
    assert out.shape[1] == 4 * stride if stride == 2 else 4
    np.testing.assert_allclose(out, brute_conv_transpose(y, w, b, stride, pad, out.shape[1:3]), atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 8, 8, 2))
    w = rng.normal(size=(4, 4, 2, 5))
    y = rng.normal(size=(1, 4, 4, 5))
    cx = forward(ops.conv2d(T(x), T(w), T(np.zeros(5)), 2, 1)).values
    ty = forward(ops.conv2d_transpose(T(y), T(w), T(np.zeros(2)), 2, 1, 0)).values
    assert np.isclose((cx * y).sum(), (x * ty).sum(), rtol=1e-12)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"dense.*\(1, 3\).*\(2, 2\)"):
        ops.dense(T([[1, 2, 3]]), T(np.eye(2)), T([0, 0]))
    with pytest.raises(ShapeError, match="conv2d"):
        ops.conv2d(T(np.zeros((1, 4, 4, 2))), T(np.zeros((3, 3, 1, 1))), T([0.0]))


# -- backward errors ----------------------------------------------------------------

def test_backward_before_forward():
    x = T([1.0, -1.0], grad=True)
    with pytest.raises(GraphError, match="before forward"):
        backward(ops.sum(ops.relu(x)))


def test_nonscalar_needs_seed():
    x = T([1.0, 2.0], grad=True)
    y = forward(ops.relu(x))
    with pytest.raises(GraphError, match="seed"):
        backward(y)
    backward(y, seed=[1.0, 1.0])
    np.testing.assert_array_equal(x.grad, [1, 1])


# -- ReLU rules ----------------------------------------------------------------------

def single_unit(x, r, rule):
    return float(relu_backward(np.array([x]), np.array([r]), rule)[0])


def test_rule_examples():
    assert single_unit(2.0, 3.0, VANILLA) == 3.0
    for rule in (VANILLA, GUIDED, BackpropRule.rectified(tau=0.0), BackpropRule.rectified(tau=5.0)):
        assert single_unit(-1.0, 3.0, rule) == 0.0
    assert single_unit(2.0, -3.0, VANILLA) == -3.0
    assert single_unit(2.0, -3.0, GUIDED) == 0.0
    assert single_unit(2.0, 3.0, BackpropRule.rectified(tau=5.0)) == 3.0
    assert single_unit(2.0, 3.0, BackpropRule.rectified(tau=7.0)) == 0.0


def test_zero_preactivation_gated_off():
    for rule in (VANILLA, GUIDED, BackpropRule.rectified(tau=-1.0)):
        assert single_unit(0.0, 3.0, rule) == 0.0


def test_percentile_50_passes_top_half():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.1, 2.0, size=(1, 8, 8))
    r = rng.normal(size=(1, 8, 8))
    out = relu_backward(x, r, BackpropRule.rectified(percentile=50))
    prod = (x * r).ravel()
    top = np.argsort(prod)[32:]
    mask = np.zeros(64, dtype=bool)
    mask[top] = True
    np.testing.assert_array_equal(out.ravel() != 0, mask)
    np.testing.assert_array_equal(out.ravel()[mask], r.ravel()[mask])


def test_percentile_is_per_sample():
    rng = np.random.default_rng(1)
    x = rng.uniform(0.1, 1, size=(2, 16))
    r = rng.normal(size=(2, 16))
    r[1] *= 100
    out = relu_backward(x, r, BackpropRule.rectified(percentile=75))
    assert ((out != 0).sum(axis=1) == 4).all()


def test_rule_validation():
    with pytest.raises(ValueError):
        BackpropRule("rectified")
    with pytest.raises(ValueError):
        BackpropRule("guided", tau=1.0)
    with pytest.raises(ValueError):
        BackpropRule.rectified(percentile=101)
    assert BackpropRule.rectified().percentile == 98.0
    with pytest.raises(ShapeError):
        relu_backward(np.zeros(3), np.zeros(4))


finite = st.floats(-10, 10, allow_nan=False, width=32)


@given(arrays(np.float32, (3, 5), elements=finite), arrays(np.float32, (3, 5), elements=finite))
def test_rectified_tau0_equals_guided(x, r):
    a = relu_backward(x, r, BackpropRule.rectified(tau=0.0))
    b = relu_backward(x, r, GUIDED)
    assert a.tobytes() == b.tobytes()


@given(arrays(np.float32, (4, 4), elements=st.floats(0.25, 10, width=32)),
       arrays(np.float32, (4, 4), elements=st.floats(0.25, 10, width=32)))
def test_all_positive_rules_agree(x, r):
    v = relu_backward(x, r, VANILLA)
    np.testing.assert_array_equal(v, relu_backward(x, r, GUIDED))
    np.testing.assert_array_equal(v, relu_backward(x, r, BackpropRule.rectified(tau=0.0)))


@given(arrays(np.float32, (6,), elements=finite), arrays(np.float32, (6,), elements=finite))
def test_guided_only_masks(x, r):
    v = relu_backward(x, r, VANILLA)
    g = relu_backward(x, r, GUIDED)
    assert np.all((g == v) | (g == 0))


# -- whole-network properties -----------------------------------------------------------

class SmallNet:
    """2 strided convs + BN (inference) + dense, 64-bit, ~600 parameters."""

    def __init__(self, seed, relu=True, dtype=F64):
        rng = np.random.default_rng(seed)
        mk = lambda *s, sc=1.0: Tensor((rng.normal(size=s) * sc).astype(dtype), requires_grad=True)  # noqa: E731
        self.x = mk(1, 8, 8, 2)
        self.w1, self.b1 = mk(3, 3, 2, 6, sc=0.4), mk(6, sc=0.1)
        self.w2, self.b2 = mk(3, 3, 6, 8, sc=0.3), mk(8, sc=0.1)
        self.wd, self.bd = mk(32, 5, sc=0.3), mk(5, sc=0.1)
        self.g, self.be = mk(6, sc=0.2), mk(6, sc=0.1)
        self.g.values += 1
        self.bn = BatchNormState(6, dtype=dtype)
        self.bn.mean = rng.normal(size=6).astype(dtype) * 0.1
        self.bn.var = rng.uniform(0.5, 1.5, size=6).astype(dtype)
        self.zc = rng.normal(size=5).astype(dtype)
        self.relu = relu

    @property
    def params(self):
        return [self.x, self.w1, self.b1, self.w2, self.b2, self.wd, self.bd, self.g, self.be]

    def act(self, h):
        return ops.relu(h) if self.relu else h

    def latent(self):
        h = self.act(ops.batchnorm(ops.conv2d(self.x, self.w1, self.b1, 2, 1), self.g, self.be, self.bn))
        h = self.act(ops.conv2d(h, self.w2, self.b2, 2, 1))
        return ops.dense(ops.flatten(h), self.wd, self.bd)

    def score(self):
        return ops.sum(ops.dot(self.latent(), Tensor(self.zc)))


def input_grad(net, rule, seed=None):
    out = forward(net.latent() if seed is not None else net.score())
    backward(out, rule, seed=seed)
    return net.x.grad.copy()


def test_grad_check_linear_network_exact():
    # affine map: the central difference is exact for any step, so a wide
    # step leaves only rounding error
    for seed in range(5):
        net = SmallNet(seed, relu=False)
        assert grad_check(net.score, net.params, eps=1.0).max_rel_error < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_grad_check_conv_dense(seed):
    net = SmallNet(seed)
    res = grad_check(net.score, net.params, eps=1e-5)
    assert res.n_checked > 0.9 * sum(p.values.size for p in net.params)
    assert res.max_rel_error < 1e-4


def test_grad_check_skips_kinks():
    net = SmallNet(5)
    # push one conv pre-activation onto the kink
    h = forward(ops.batchnorm(ops.conv2d(net.x, net.w1, net.b1, 2, 1), net.g, net.be, net.bn)).values
    net.be.values[0] -= h[0, 0, 0, 0]
    res = grad_check(net.score, net.params, eps=1e-5)
    assert res.n_skipped_kink > 0
    assert res.max_rel_error < 1e-4


def test_batchnorm_training_mode_grad():
    rng = np.random.default_rng(2)
    x = T(rng.normal(size=(4, 3, 3, 2)), grad=True)
    g, b = T(rng.uniform(0.5, 1.5, 2), grad=True), T(rng.normal(size=2), grad=True)
    wts = T(rng.normal(size=(4, 3, 3, 2)))
    st_ = BatchNormState(2, dtype=F64)
    build = lambda: ops.sum(ops.mul(ops.batchnorm(x, g, b, st_, training=True), wts))  # noqa: E731
    assert grad_check(build, [x, g, b]).max_rel_error < 1e-5


@pytest.mark.parametrize("seed", range(4))
def test_linear_network_rules_identical(seed):
    net = SmallNet(seed, relu=False)
    g = [input_grad(net, r) for r in (VANILLA, GUIDED, BackpropRule.rectified(percentile=90))]
    np.testing.assert_array_equal(g[0], g[1])
    np.testing.assert_array_equal(g[0], g[2])


@pytest.mark.parametrize("seed", range(4))
def test_network_rectified_tau0_bit_identical_to_guided(seed):
    net = SmallNet(seed, dtype=np.float32)
    a = input_grad(net, BackpropRule.rectified(tau=0.0))
    b = input_grad(net, GUIDED)
    assert a.tobytes() == b.tobytes()


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 2**16), st.floats(-3, 3), st.floats(-3, 3))
def test_vanilla_linear_in_seed(seed, alpha, beta):
    net = SmallNet(seed % 50)
    rng = np.random.default_rng(seed)
    s1, s2 = rng.normal(size=(1, 5)), rng.normal(size=(1, 5))
    lhs = input_grad(net, VANILLA, alpha * s1 + beta * s2)
    rhs = alpha * input_grad(net, VANILLA, s1) + beta * input_grad(net, VANILLA, s2)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-10)


def test_forward_deterministic():
    net = SmallNet(1, dtype=np.float32)
    a = forward(net.latent()).values
    b = forward(net.latent()).values
    assert a.tobytes() == b.tobytes()


def test_frozen_leaves_untouched_by_backward():
    w = Tensor(np.ones((2, 2)))
    x = T([[1.0, 2.0]], grad=True)
    backward(forward(ops.sum(ops.dense(x, w, Tensor(np.zeros(2))))))
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, [[2, 2]])


def test_op_record_and_dag():
    x = T([1.0, 2.0])
    y = ops.relu(x)
    z = ops.add(y, y)
    assert x.op_record is None
    assert z.op_record == {"kind": "add", "parents": [y.id, y.id]}
    forward(z)
    np.testing.assert_array_equal(z.values, [2, 4])
