import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hpdseg import gradcheck, ops
from hpdseg.errors import ArgumentError, DegenerateBatchError, ShapeError, UsageError
from hpdseg.reference import naive_avg_pool, naive_max_pool, naive_min_pool, naive_strided_conv
from hpdseg.tensor import Rng

SQUARE = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)


# -- pooling -----------------------------------------------------------------


def test_min_pool_square():
    y, idx = ops.min_pool2d(SQUARE, 2)
    assert y.ravel().tolist() == [1.0]
    assert idx.idx.ravel().tolist() == [0]


def test_max_pool_square():
    y, idx = ops.max_pool2d(SQUARE, 2)
    assert y.ravel().tolist() == [4.0]
    assert idx.idx.ravel().tolist() == [3]


def test_avg_pool_square():
    assert ops.avg_pool2d(SQUARE, 2).ravel().tolist() == [2.5]


@pytest.mark.parametrize("k", [1, 2, 4])
def test_constant_input(k):
    x = np.full((2, 3, 8, 8), 1.75)
    for out in (ops.min_pool2d(x, k)[0], ops.max_pool2d(x, k)[0], ops.avg_pool2d(x, k)):
        assert out.shape == (2, 3, 8 // k, 8 // k)
        assert (out == 1.75).all()


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_seed42_matches_brute_force(dtype):
    x = Rng(42).uniform((1, 2, 4, 4), 0, 1, dtype)
    for fast, slow in ((ops.min_pool2d, naive_min_pool), (ops.max_pool2d, naive_max_pool)):
        y, idx = fast(x, 2)
        y_ref, idx_ref = slow(x, 2)
        assert np.array_equal(y, y_ref)
        assert np.array_equal(idx.idx, idx_ref)
    assert np.array_equal(ops.avg_pool2d(x, 2), naive_avg_pool(x, 2))


def test_avg_pool_float32_relative_error():
    x = Rng(4).uniform((2, 3, 8, 8), 0, 1, np.float32)
    y = ops.avg_pool2d(x, 4)
    oracle = naive_avg_pool(x, 4)
    assert np.max(np.abs(y - oracle) / np.abs(oracle)) <= 1e-7
    # against the exact mean: 15 sequential float32 adds, positive terms
    exact = x.astype(np.float64).reshape(2, 3, 2, 4, 2, 4).sum(axis=(3, 5)) / 16
    assert np.max(np.abs(y - exact) / exact) <= 15 * 2.0**-24


def test_tie_breaking_first_in_row_major():
    x = np.array([[5.0, 1.0], [1.0, 5.0]]).reshape(1, 1, 2, 2)
    assert ops.min_pool2d(x)[1].idx.item() == 1
    assert ops.max_pool2d(x)[1].idx.item() == 0
    c = np.zeros((1, 1, 2, 2))
    assert ops.min_pool2d(c)[1].idx.item() == 0
    assert ops.max_pool2d(c)[1].idx.item() == 0


def test_indices_stay_inside_windows():
    x = Rng(8).uniform((2, 3, 6, 6))
    for pool in (ops.min_pool2d, ops.max_pool2d):
        idx = pool(x, 3)[1].idx
        ys, xs = np.divmod(idx, 6)
        assert (ys // 3 == np.arange(2)[:, None]).all()
        assert (xs // 3 == np.arange(2)[None, :]).all()


def test_non_divisible_is_an_error():
    x = np.zeros((1, 1, 5, 4))
    for pool in (ops.min_pool2d, ops.max_pool2d, ops.avg_pool2d):
        with pytest.raises(ShapeError):
            pool(x, 2)


def test_bad_window_size():
    with pytest.raises(ArgumentError):
        ops.min_pool2d(SQUARE, 0)


def test_pad_mode_never_selects_padding():
    x = -np.abs(Rng(1).uniform((1, 2, 5, 5), 1, 2)) * 1e30
    y, idx = ops.max_pool2d(x, 2, pad=True)
    assert y.shape == (1, 2, 3, 3)
    assert (y > -np.inf).all() and (idx.idx < 25).all()
    assert y[0, 0, 2, 2] == x[0, 0, 4, 4]
    y, idx = ops.min_pool2d(-x, 2, pad=True)
    assert y[0, 1, 2, 2] == -x[0, 1, 4, 4]
    assert ops.avg_pool2d(np.ones((1, 1, 5, 5)), 2, pad=True).ravel().tolist() == [1.0] * 9


def test_pool_backward_routing():
    _, idx = ops.min_pool2d(SQUARE, 2)
    g = ops.pool_backward(np.ones((1, 1, 1, 1)), idx, SQUARE.shape)
    assert g.reshape(2, 2).tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_pool_backward_zero_grad():
    x = Rng(1).uniform((2, 2, 4, 4))
    _, idx = ops.max_pool2d(x, 2)
    assert (ops.pool_backward(np.zeros((2, 2, 2, 2)), idx) == 0).all()


def test_pool_backward_accumulates_and_conserves():
    x = Rng(2).uniform((2, 3, 4, 4))
    _, i_min = ops.min_pool2d(x)
    _, i_max = ops.max_pool2d(x)
    g = Rng(3).uniform((2, 3, 2, 2))
    out = ops.pool_backward(g, i_min)
    assert np.isclose(out.sum(), g.sum())
    ops.pool_backward(g, i_max, out=out)
    assert np.isclose(out.sum(), 2 * g.sum())


def test_pool_backward_shape_mismatch():
    _, idx = ops.max_pool2d(SQUARE)
    with pytest.raises(ShapeError):
        ops.pool_backward(np.zeros((1, 1, 2, 2)), idx)


def test_pool_gradients_match_finite_differences():
    assert gradcheck.check_pool("min") < gradcheck.TOL_LINEAR
    assert gradcheck.check_pool("max") < gradcheck.TOL_LINEAR
    assert gradcheck.check_avg_pool() < gradcheck.TOL_LINEAR


shapes = st.tuples(st.sampled_from([1, 2]), st.sampled_from([1, 3]), st.sampled_from([2, 4, 6, 8]),
                   st.sampled_from([2, 4, 6, 8]), st.sampled_from([1, 2]))


@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 2**31))
def test_order_reversal(shape, seed):
    *dims, k = shape
    x = Rng(seed).uniform(dims, -1, 1)
    # coarse grid forces ties so the shared tie rule is exercised too
    x = np.round(x * 3) / 3
    y_max, i_max = ops.max_pool2d(-x, k)
    y_min, i_min = ops.min_pool2d(x, k)
    assert np.array_equal(y_max, -y_min)
    assert np.array_equal(i_max.idx, i_min.idx)


@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 2**31))
def test_monotonicity(shape, seed):
    *dims, k = shape
    r = Rng(seed)
    x = r.uniform(dims, -1, 1)
    x2 = x + r.uniform(dims, 0, 0.5)
    assert (ops.min_pool2d(x, k)[0] <= ops.min_pool2d(x2, k)[0]).all()
    assert (ops.max_pool2d(x, k)[0] <= ops.max_pool2d(x2, k)[0]).all()


def test_k1_is_identity():
    x = Rng(6).uniform((2, 3, 4, 6))
    assert np.array_equal(ops.min_pool2d(x, 1)[0], x)
    assert np.array_equal(ops.max_pool2d(x, 1)[0], x)
    assert np.array_equal(ops.avg_pool2d(x, 1), x)


# -- 1x1 conv ----------------------------------------------------------------


def test_conv1x1_identity():
    x = Rng(1).uniform((2, 3, 4, 4))
    p = ops.Conv1x1Params(np.eye(3), np.zeros(3))
    assert np.array_equal(ops.conv1x1_forward(x, p), x)


def test_conv1x1_channel_sum():
    x = np.array([2.0, 3.0]).reshape(1, 2, 1, 1)
    p = ops.Conv1x1Params(np.array([[1.0, 1.0]]), np.zeros(1))
    assert ops.conv1x1_forward(x, p).item() == 5.0


def test_conv1x1_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv1x1_forward(np.zeros((1, 2, 1, 1)), ops.Conv1x1Params(np.zeros((1, 3)), np.zeros(1)))


def test_conv1x1_backward_scalar_case():
    w = 0.7
    p = ops.Conv1x1Params(np.array([[w]]), np.zeros(1))
    gx, gw, gb = ops.conv1x1_backward(np.ones((1, 1, 1, 1)), np.ones((1, 1, 1, 1)), p)
    assert gw.item() == 1.0 and gb.item() == 1.0 and gx.item() == w


def test_conv1x1_backward_zero():
    rng = Rng(1)
    p = ops.Conv1x1Params(rng.uniform((2, 3)), rng.uniform((2,)))
    grads = ops.conv1x1_backward(np.zeros((1, 2, 2, 2)), rng.uniform((1, 3, 2, 2)), p)
    assert all((g == 0).all() for g in grads)


def test_conv1x1_finite_differences():
    assert gradcheck.check_conv1x1() < gradcheck.TOL_LINEAR


# -- batch norm --------------------------------------------------------------


def test_batchnorm_training_normalizes():
    x = Rng(3).uniform((4, 3, 5, 5), -3, 7)
    y, _ = ops.batchnorm_forward(x, ops.BatchNormParams.init(3), training=True)
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.abs(y.var(axis=(0, 2, 3)) - 1).max() < 1e-5


def test_batchnorm_gamma_zero_gives_beta():
    p = ops.BatchNormParams.init(2)
    p.gamma[:] = 0
    p.beta[:] = [0.3, -1.2]
    y, _ = ops.batchnorm_forward(Rng(1).uniform((2, 2, 3, 3)), p, training=True)
    assert (y[:, 0] == 0.3).all() and (y[:, 1] == -1.2).all()


def test_batchnorm_inference_identity():
    x = Rng(2).uniform((2, 2, 3, 3), -2, 2)
    p = ops.BatchNormParams.init(2, eps=1e-12)
    y, _ = ops.batchnorm_forward(x, p, training=False)
    assert np.abs(y - x).max() < 1e-5


def test_batchnorm_running_stats_update():
    x = Rng(4).uniform((2, 1, 2, 2))
    p = ops.BatchNormParams.init(1)
    ops.batchnorm_forward(x, p, training=True)
    m = x.size
    assert np.isclose(p.running_mean[0], 0.1 * x.mean())
    assert np.isclose(p.running_var[0], 0.9 + 0.1 * x.var() * m / (m - 1))


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        ops.batchnorm_forward(np.ones((1, 2, 1, 1)), ops.BatchNormParams.init(2), training=True)


def test_batchnorm_backward_zero_and_beta():
    x = Rng(5).uniform((2, 3, 2, 2))
    _, cache = ops.batchnorm_forward(x, ops.BatchNormParams.init(3), training=True)
    assert all((g == 0).all() for g in ops.batchnorm_backward(np.zeros_like(x), cache))
    g = Rng(6).uniform(x.shape)
    _, _, gb = ops.batchnorm_backward(g, cache)
    assert np.allclose(gb, g.sum(axis=(0, 2, 3)))


def test_batchnorm_backward_rejects_inference_cache():
    _, cache = ops.batchnorm_forward(np.ones((2, 1, 2, 2)), ops.BatchNormParams.init(1), training=False)
    with pytest.raises(UsageError):
        ops.batchnorm_backward(np.ones((2, 1, 2, 2)), cache)


def test_batchnorm_finite_differences():
    assert gradcheck.check_batchnorm() < gradcheck.TOL_COMPOSITE


# -- ReLU --------------------------------------------------------------------


def test_relu_values():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    assert ops.relu(x).ravel().tolist() == [0.0, 0.0, 2.0]
    assert ops.relu_backward(np.ones_like(x), x).ravel().tolist() == [0.0, 0.0, 1.0]


def test_relu_nonnegative_identity():
    x = Rng(1).uniform((1, 2, 3, 3), 0, 1)
    assert np.array_equal(ops.relu(x), x)


def test_relu_finite_differences():
    assert gradcheck.check_relu() < gradcheck.TOL_LINEAR


# -- strided conv ------------------------------------------------------------


def test_strided_conv_quarter_kernel_is_avg_pool():
    x = Rng(1).uniform((2, 1, 6, 6))
    w = np.full((1, 1, 2, 2), 0.25)
    assert np.abs(ops.strided_conv_downsample(x, w, np.zeros(1)) - ops.avg_pool2d(x, 2)).max() < 1e-6


def test_strided_conv_one_hot_subsamples():
    x = Rng(2).uniform((1, 2, 4, 4))
    w = np.zeros((2, 2, 2, 2))
    w[0, 0, 0, 0] = w[1, 1, 0, 0] = 1.0
    assert np.array_equal(ops.strided_conv_downsample(x, w), x[:, :, ::2, ::2])


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_strided_conv_matches_brute_force(dtype):
    rng = Rng(3)
    x = rng.uniform((2, 3, 4, 6), -1, 1, dtype)
    w = rng.uniform((4, 3, 2, 2), -1, 1, dtype)
    b = rng.uniform((4,), -1, 1, dtype)
    assert np.array_equal(ops.strided_conv_downsample(x, w, b), naive_strided_conv(x, w, b))


def test_strided_conv_odd_extent():
    with pytest.raises(ShapeError):
        ops.strided_conv_downsample(np.zeros((1, 1, 3, 4)), np.zeros((1, 1, 2, 2)))


def test_strided_conv_finite_differences():
    assert gradcheck.check_strided_conv() < gradcheck.TOL_LINEAR
