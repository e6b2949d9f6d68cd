import numpy as np
import pytest

import gradcheck
import oracles
from fcspn import ops
from fcspn import tensor as T


def setup_function(_):
    T.clear_tape()


# ---------------------------------------------------------------------------
# conv3d
# ---------------------------------------------------------------------------

def test_conv_out_extents():
    spec = ops.Conv3dSpec(kernel=(5, 1, 1), stride=(5, 1, 1), padding=(2, 0, 0))
    assert spec.out_extents((204, 64, 64)) == (41, 64, 64)
    assert spec.out_extents((20, 32, 32)) == (4, 32, 32)
    spec = ops.Conv3dSpec(kernel=(3, 3, 3), stride=(2, 1, 1))
    assert spec.out_extents((41, 64, 64)) == (21, 64, 64)


def test_conv_default_padding_preserves_extents():
    spec = ops.Conv3dSpec(kernel=(3, 3, 3))
    assert spec.pad() == (1, 1, 1)
    assert spec.out_extents((5, 6, 7)) == (5, 6, 7)


def test_conv_kernel_too_large():
    spec = ops.Conv3dSpec(kernel=(5, 1, 1), padding=(0, 0, 0))
    with pytest.raises(T.ShapeError):
        spec.out_extents((4, 3, 3))


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(42)
    for case in range(100):
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 4))
        extents = tuple(int(e) for e in rng.integers(1, 8, 3))
        kernel = tuple(int(rng.integers(1, n + 1)) for n in extents)
        stride = tuple(int(s) for s in rng.integers(1, 4, 3))
        if rng.uniform() < 0.5:
            padding = tuple(k // 2 for k in kernel)
        else:
            padding = tuple(int(p) for p in rng.integers(0, 3, 3))
        x = rng.uniform(-1, 1, (cin,) + extents)
        w = rng.uniform(-1, 1, (cout, cin) + kernel)
        b = rng.uniform(-1, 1, cout) if rng.uniform() < 0.5 else None
        spec = ops.Conv3dSpec(kernel=kernel, stride=stride, padding=padding)
        got = ops.conv3d(T.Tensor(x), T.Tensor(w),
                         None if b is None else T.Tensor(b), spec).data
        want = oracles.conv3d_reference(x, w, b, stride, padding)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) <= 1e-12, f"case {case}"


def test_conv_gradcheck():
    rng = np.random.default_rng(7)
    cases = [
        ((2, 5, 4, 4), (3, 2, 3, 3, 3), (1, 1, 1), None),
        ((2, 6, 5, 5), (2, 2, 3, 3, 3), (2, 1, 1), None),
        ((1, 5, 4, 4), (2, 1, 5, 1, 1), (5, 1, 1), (2, 0, 0)),
        ((3, 4, 5, 5), (2, 3, 1, 3, 3), (1, 2, 2), None),
        ((2, 3, 3, 3), (2, 2, 2, 2, 2), (1, 1, 1), (0, 0, 0)),
    ]
    for xs, ws, stride, padding in cases:
        spec = ops.Conv3dSpec(kernel=ws[2:], stride=stride, padding=padding)
        proj = gradcheck.projection(
            (ws[0],) + spec.out_extents(xs[1:]), rng)

        def build(x, w, b):
            return gradcheck.project(ops.conv3d(x, w, b, spec), proj)

        arrs = [rng.uniform(-1, 1, xs), rng.uniform(-1, 1, ws),
                rng.uniform(-1, 1, ws[0])]
        gradcheck.check_grads(build, arrs)


def test_conv_shape_errors():
    spec = ops.Conv3dSpec(kernel=(3, 3, 3))
    with pytest.raises(T.ShapeError):
        ops.conv3d(T.zeros((4, 4, 4)), T.zeros((2, 2, 3, 3, 3)), None, spec)
    with pytest.raises(T.ShapeError):
        ops.conv3d(T.zeros((2, 4, 4, 4)), T.zeros((2, 3, 3, 3, 3)), None, spec)
    with pytest.raises(T.ShapeError):
        ops.conv3d(T.zeros((2, 4, 4, 4)), T.zeros((2, 2, 3, 3, 3)),
                   T.zeros((3,)), spec)


# ---------------------------------------------------------------------------
# batchnorm
# ---------------------------------------------------------------------------

def _bn_params(c):
    gamma = T.full((c,), 1.0, requires_grad=True)
    beta = T.zeros((c,), requires_grad=True)
    return gamma, beta


def test_bn_train_normalizes():
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.uniform(-3, 5, (3, 4, 5, 6)))
    gamma, beta = _bn_params(3)
    out = ops.batchnorm(x, gamma, beta, ops.BatchNormState(3), training=True).data
    assert np.allclose(out.mean(axis=(1, 2, 3)), 0, atol=1e-10)
    assert np.allclose(out.var(axis=(1, 2, 3)), 1, atol=1e-3)


def test_bn_running_stats_blend():
    rng = np.random.default_rng(2)
    x = rng.uniform(-2, 2, (2, 3, 3, 3))
    state = ops.BatchNormState(2)
    gamma, beta = _bn_params(2)
    ops.batchnorm(T.Tensor(x), gamma, beta, state, training=True)
    mu = x.mean(axis=(1, 2, 3))
    var = x.var(axis=(1, 2, 3))
    assert np.allclose(state.running_mean, 0.1 * mu, atol=1e-12)
    assert np.allclose(state.running_var, 0.9 + 0.1 * var, atol=1e-12)


def test_bn_eval_uses_running_stats():
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 2, (2, 2, 2, 2))
    state = ops.BatchNormState(2)
    state.running_mean = np.array([1.0, -1.0])
    state.running_var = np.array([4.0, 0.25])
    gamma = T.Tensor([2.0, 3.0])
    beta = T.Tensor([0.5, -0.5])
    out = ops.batchnorm(T.Tensor(x), gamma, beta, state, training=False).data
    want = (gamma.data[:, None, None, None]
            * (x - state.running_mean[:, None, None, None])
            / np.sqrt(state.running_var + 1e-5)[:, None, None, None]
            + beta.data[:, None, None, None])
    assert np.allclose(out, want, atol=1e-12)
    # eval must not move the running stats
    assert np.array_equal(state.running_mean, [1.0, -1.0])


def test_bn_single_element_warns_and_yields_shift():
    x = T.Tensor(np.array([3.0, -2.0]).reshape(2, 1, 1, 1))
    gamma = T.Tensor([2.0, 2.0])
    beta = T.Tensor([0.25, -0.25])
    with pytest.warns(RuntimeWarning):
        out = ops.batchnorm(x, gamma, beta, ops.BatchNormState(2), training=True)
    assert np.allclose(out.data.ravel(), [0.25, -0.25], atol=1e-12)


def test_bn_gradcheck_train_and_eval():
    rng = np.random.default_rng(4)
    for training in (True, False):
        state = ops.BatchNormState(2)
        state.running_mean = rng.uniform(-1, 1, 2)
        state.running_var = rng.uniform(0.5, 2.0, 2)
        proj = gradcheck.projection((2, 3, 2, 2), rng)

        def build(x, gamma, beta):
            return gradcheck.project(
                ops.batchnorm(x, gamma, beta, state, training=training), proj)

        arrs = [rng.uniform(-1, 1, (2, 3, 2, 2)),
                rng.uniform(0.5, 1.5, 2), rng.uniform(-0.5, 0.5, 2)]
        gradcheck.check_grads(build, arrs)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def test_trilinear_axis_example():
    x = T.Tensor(np.array([0.0, 2.0]).reshape(1, 2, 1, 1))
    out = ops.trilinear_upsample(x, (4, 1, 1)).data.ravel()
    assert np.allclose(out, [0, 2 / 3, 4 / 3, 2], atol=1e-12)


def test_trilinear_identity_and_constant():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (2, 3, 4, 5))
    same = ops.trilinear_upsample(T.Tensor(x), (3, 4, 5)).data
    assert np.allclose(same, x, atol=1e-12)
    const = ops.trilinear_upsample(T.full((2, 2, 2, 2), 3.5), (5, 7, 3)).data
    assert np.allclose(const, 3.5, atol=1e-12)


def test_trilinear_matches_separable_oracle():
    rng = np.random.default_rng(6)
    x = rng.uniform(-1, 1, (2, 3, 4, 2))
    got = ops.trilinear_upsample(T.Tensor(x), (5, 7, 4)).data
    want = x
    for axis, m in ((1, 5), (2, 7), (3, 4)):
        want = np.apply_along_axis(oracles.trilinear_axis_reference, axis, want, m)
    assert np.allclose(got, want, atol=1e-12)


def test_trilinear_endpoints_pinned():
    rng = np.random.default_rng(8)
    x = rng.uniform(-1, 1, (1, 4, 3, 3))
    out = ops.trilinear_upsample(T.Tensor(x), (9, 3, 3)).data
    assert np.allclose(out[:, 0], x[:, 0], atol=1e-12)
    assert np.allclose(out[:, -1], x[:, -1], atol=1e-12)


def test_trilinear_gradcheck():
    rng = np.random.default_rng(9)
    proj = gradcheck.projection((2, 5, 6, 3), rng)

    def build(x):
        return gradcheck.project(ops.trilinear_upsample(x, (5, 6, 3)), proj)

    gradcheck.check_grads(build, [rng.uniform(-1, 1, (2, 3, 4, 3))])


def test_pool_global_is_mean():
    rng = np.random.default_rng(10)
    x = rng.uniform(-1, 1, (3, 4, 5, 6))
    out = ops.adaptive_avg_pool(T.Tensor(x), (1, 1, 1)).data
    assert out.shape == (3, 1, 1, 1)
    assert np.allclose(out.ravel(), x.mean(axis=(1, 2, 3)), atol=1e-12)


def test_pool_bins_cover_input():
    rng = np.random.default_rng(11)
    x = rng.uniform(-1, 1, (1, 5, 4, 7))
    out = ops.adaptive_avg_pool(T.Tensor(x), (2, 2, 3)).data
    # first bin on the depth axis spans rows [0, ceil(5/2)) = [0, 3)
    assert np.allclose(out[0, 0, 0, 0], x[0, 0:3, 0:2, 0:3].mean(), atol=1e-12)
    assert np.allclose(out[0, 1, 1, 2], x[0, 2:5, 2:4, 4:7].mean(), atol=1e-12)


def test_pool_gradcheck():
    rng = np.random.default_rng(12)
    proj = gradcheck.projection((2, 2, 2, 2), rng)

    def build(x):
        return gradcheck.project(ops.adaptive_avg_pool(x, (2, 2, 2)), proj)

    gradcheck.check_grads(build, [rng.uniform(-1, 1, (2, 5, 4, 3))])


# ---------------------------------------------------------------------------
# channel plumbing
# ---------------------------------------------------------------------------

def test_concat_values_and_grads():
    rng = np.random.default_rng(13)
    a = rng.uniform(-1, 1, (2, 3, 3, 3))
    b = rng.uniform(-1, 1, (4, 3, 3, 3))
    ta = T.Tensor(a, requires_grad=True)
    tb = T.Tensor(b, requires_grad=True)
    out = ops.concat_channels(ta, tb)
    assert out.shape == (6, 3, 3, 3)
    assert np.array_equal(out.data[:2], a)
    assert np.array_equal(out.data[2:], b)
    proj = gradcheck.projection(out.shape, rng)
    T.backward(gradcheck.project(out, proj))
    assert np.allclose(ta.grad, proj.data[:2], atol=1e-12)
    assert np.allclose(tb.grad, proj.data[2:], atol=1e-12)


def test_concat_extent_mismatch():
    with pytest.raises(T.ShapeError):
        ops.concat_channels(T.zeros((2, 3, 3, 3)), T.zeros((2, 3, 3, 4)))


def test_softmax_properties():
    rng = np.random.default_rng(14)
    x = rng.uniform(-5, 5, (4, 2, 3, 3))
    p = ops.softmax_channels(T.Tensor(x)).data
    assert np.allclose(p.sum(axis=0), 1, atol=1e-12)
    assert np.all(p > 0)
    shifted = ops.softmax_channels(T.Tensor(x + 100.0)).data
    assert np.allclose(p, shifted, atol=1e-12)
    half = ops.softmax_channels(T.zeros((2, 1, 1, 1))).data
    assert np.allclose(half, 0.5, atol=1e-12)


def test_softmax_gradcheck():
    rng = np.random.default_rng(15)
    proj = gradcheck.projection((3, 2, 2, 2), rng)

    def build(x):
        return gradcheck.project(ops.softmax_channels(x), proj)

    gradcheck.check_grads(build, [rng.uniform(-1, 1, (3, 2, 2, 2))])
