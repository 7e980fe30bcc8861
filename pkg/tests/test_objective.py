import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gsvr.objective import LossConfig, dssim_loss, l1_loss, ssim_map, total_loss, tv_loss

import oracles

img = arrays(np.float64, (9, 9), elements=st.floats(0.0, 1.0))


def test_l1_values():
    assert l1_loss(np.zeros((2, 2)), np.ones((2, 2)))[0] == 1.0
    assert l1_loss([[0.2, 0.4]], [[0.5, 0.1]])[0] == pytest.approx(0.3)
    _, g = l1_loss([[1.0, 2.0]], [[1.0, 3.0]])
    assert g.tolist() == [[0.0, 0.5]]


def test_dssim_identical_images():
    rng = np.random.default_rng(0)
    a = rng.random((16, 16))
    v, g = dssim_loss(a, a.copy())
    assert abs(v) < 1e-12
    assert np.abs(g).max() < 1e-12


def test_dssim_matches_direct_loop():
    rng = np.random.default_rng(1)
    a, b = rng.random((12, 14)), rng.random((12, 14))
    v, _ = dssim_loss(a, b)
    assert v == pytest.approx((1 - oracles.ssim_direct(a, b)) / 2, abs=1e-12)


def test_ssim_matches_skimage_in_the_interior():
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(2)
    a = rng.random((40, 40))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    S, _ = ssim_map(a, b)
    _, ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                   data_range=1.0, full=True)
    np.testing.assert_allclose(S[8:-8, 8:-8], ref[8:-8, 8:-8], atol=1e-10)


def test_dssim_gradient_finite_differences():
    rng = np.random.default_rng(3)
    a, b = rng.random((10, 11)), rng.random((10, 11))
    _, g = dssim_loss(a, b)
    fd = oracles.central_diff(lambda: dssim_loss(a, b)[0], b)
    assert oracles.rel_err(g, fd) < 1e-6


def test_dssim_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        dssim_loss(np.zeros((4, 4)), np.zeros((4, 5)))


def test_tv_constant_and_ramp():
    assert tv_loss(np.full((5, 6, 7), 3.0))[0] == 0.0
    N, a = 8, 0.25
    ramp = np.broadcast_to(a * np.arange(N)[:, None, None], (N, N, N))
    assert tv_loss(ramp)[0] == pytest.approx(a * (N - 1) / N)


def test_tv_matches_loops_and_gradient():
    rng = np.random.default_rng(4)
    v = rng.random((4, 5, 3))
    val, g = tv_loss(v)
    assert val == pytest.approx(oracles.tv_loops(v), abs=1e-14)
    fd = oracles.central_diff(lambda: tv_loss(v)[0], v)
    assert oracles.rel_err(g, fd) < 1e-6


@settings(max_examples=40, deadline=None)
@given(img, img)
def test_ssim_properties(a, b):
    S = np.mean(ssim_map(a, b)[0])
    assert S <= 1.0 + 1e-12
    assert S == pytest.approx(np.mean(ssim_map(b, a)[0]), abs=1e-12)
    v, _ = dssim_loss(a, b)
    assert 0.0 - 1e-12 <= v <= 1.0 + 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 4, 4), elements=st.floats(-2.0, 2.0)), st.floats(0.0, 3.0))
def test_tv_nonnegative_and_homogeneous(v, c):
    t = tv_loss(v)[0]
    assert t >= 0.0
    assert tv_loss(c * v)[0] == pytest.approx(c * t, rel=1e-9, abs=1e-12)


def test_total_loss_combination():
    rng = np.random.default_rng(5)
    ys = [rng.random((12, 12)) for _ in range(3)]
    yh = [rng.random((12, 12)) for _ in range(3)]
    vol = rng.random((6, 6, 6))
    cfg = LossConfig(lambda1=0.3, lambda2=0.01)
    rep = total_loss(ys, yh, vol, cfg)
    l1 = np.mean([l1_loss(a, b)[0] for a, b in zip(ys, yh)])
    d = np.mean([dssim_loss(a, b)[0] for a, b in zip(ys, yh)])
    assert rep.total == pytest.approx(l1 + 0.3 * d + 0.01 * tv_loss(vol)[0])
    assert rep.l1 == pytest.approx(l1)
    # gradients of the batch mean
    k = 1
    fd = oracles.central_diff(lambda: total_loss(ys, yh, None, cfg).total, yh[k])
    assert oracles.rel_err(rep.slice_grads[k], fd) < 1e-6
    assert total_loss(ys, yh, None, cfg).tv_grad is None
    with pytest.raises(ValueError):
        total_loss(ys, yh[:2], None, cfg)


def test_lambda_zero_reduces_to_l1():
    rng = np.random.default_rng(6)
    ys = [rng.random((8, 8))]
    yh = [rng.random((8, 8))]
    rep = total_loss(ys, yh, rng.random((4, 4, 4)), LossConfig(lambda1=0.0, lambda2=0.0))
    assert rep.total == pytest.approx(l1_loss(ys[0], yh[0])[0])


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda1=-1)
    with pytest.raises(ValueError):
        LossConfig(ssim_window=4)
    with pytest.raises(ValueError):
        LossConfig(dynamic_range=0)
