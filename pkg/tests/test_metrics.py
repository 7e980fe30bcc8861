import numpy as np
import pytest

from gsvr.metrics import (PSNR_CAP, evaluate_reconstruction, motion_report, nrmse, psnr,
                          register_rigid, ssim3d, support_mask, volume_report)
from gsvr.phantom import make_phantom, make_trajectory
from gsvr.rigid import RigidTransform, axis_angle_to_quat, geodesic_errors
from gsvr.volume import VoxelVolume


def test_psnr_twenty_db_example():
    ref = np.zeros((4, 4, 4))
    ref[0, 0, 0] = 1.0
    test = ref + 0.1
    assert psnr(ref, test) == pytest.approx(20.0, abs=1e-10)


def test_psnr_identical_is_capped_and_peak_is_checked():
    a = np.random.default_rng(0).random((5, 5, 5))
    assert psnr(a, a) == PSNR_CAP
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_ssim_identical_is_one():
    a = np.random.default_rng(1).random((16, 16, 16))
    assert ssim3d(a, a) == pytest.approx(1.0, abs=1e-10)


def test_ssim_matches_skimage():
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(2)
    a = rng.random((20, 20, 20))
    b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0)
    assert ssim3d(a, b) == pytest.approx(ref, abs=1e-10)


def test_nrmse_shift_invariance_and_value():
    rng = np.random.default_rng(3)
    a = rng.random((6, 6, 6))
    b = a + 0.05 * rng.normal(size=a.shape)
    assert nrmse(a + 7.0, b + 7.0) == pytest.approx(nrmse(a, b), abs=1e-10)
    ref = np.array([0.0, 2.0])
    assert nrmse(ref, ref + 0.2) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ValueError):
        nrmse(np.ones(3), np.ones(3))


def test_support_mask_dilates():
    v = np.zeros((9, 9, 9))
    v[4, 4, 4] = 1
    m = support_mask(v)
    assert m.sum() == 25  # L1 ball of radius 2 in 3D
    assert m[4, 4, 6] and not m[4, 4, 7]


def test_registration_recovers_a_known_motion():
    # the mixture has no near-spherical shells, so rotation is well conditioned
    p = make_phantom("gaussian-mixture", spacing=2.0, dims=(32, 32, 32), seed=0)
    T = RigidTransform(axis_angle_to_quat(np.radians([2.0, -1.5, 3.0])), [1.0, -0.6, 0.4])
    # moved(x) = ref(T^-1 x), so registering moved onto ref must find T
    moved = VoxelVolume(p.volume.sample(T.inverse().apply(p.volume.grid.points()), order=3)
                        .reshape(p.volume.dims), p.volume.grid)
    est, _ = register_rigid(p.volume, moved)
    rot, tr = geodesic_errors(est, T)
    assert rot < 0.2 and tr < 0.1
    rep = volume_report(p.volume, moved)
    assert rep.psnr_registered > rep.psnr + 5


def test_motion_report_gauge_invariance():
    traj = make_trajectory(24, "moderate", "random-walk", 7).transforms
    est = [RigidTransform(axis_angle_to_quat(np.radians([0.5, 0, -0.3])),
                          [0.2, 0.1, 0]).compose(t) for t in traj]
    G = RigidTransform(axis_angle_to_quat(np.radians([10.0, -20.0, 5.0])), [5.0, -3.0, 2.0])
    moved = [G.compose(e) for e in est]
    a = motion_report(traj, est)
    b = motion_report(traj, moved)
    np.testing.assert_allclose(a.rotation_deg, b.rotation_deg, atol=1e-8)
    np.testing.assert_allclose(a.translation_mm, b.translation_mm, atol=1e-8)
    exact = motion_report(traj, [G.compose(t) for t in traj])
    assert exact.rotation_deg.max() < 1e-6 and exact.translation_mm.max() < 1e-6
    raw = motion_report(traj, moved, align=False)
    assert raw.rotation_deg.min() > 5
    s = a.summary()
    assert s["n_slices"] == 24 and set(s) == {"rotation_deg", "translation_mm", "n_slices"}
    with pytest.raises(ValueError):
        motion_report(traj, est[:3])


def test_evaluate_reconstruction_of_exact_gaussians():
    p = make_phantom("gaussian-mixture", spacing=2.0, dims=(20, 20, 20), seed=1)
    ts = [[RigidTransform()] * 3]
    out = evaluate_reconstruction(p.gaussians, ts, p.volume, ts, register=False)
    assert out["volume"]["psnr"] == PSNR_CAP
    assert out["volume"]["nrmse"] == 0.0
    assert out["motion"]["rotation_deg"]["max"] < 1e-6
