import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsvr.gaussians import (CUTOFF, GaussianGrads, GaussianSet, build_index, eval_primitive,
                            eval_volume, eval_volume_backward, field_index, pack_primitives,
                            rasterize_to_grid)
from gsvr.rigid import axis_angle_to_quat
from gsvr.volume import GridSpec

import oracles


def _set(rng, J, **kw):
    return GaussianSet(*oracles.random_gaussians(rng, J, **kw))


def test_eval_primitive_closed_forms():
    q = [1, 0, 0, 0]
    assert eval_primitive([1, 2, 3], q, np.log([3, 1, 2]), 0.7, [1, 2, 3]) == 0.7
    v = eval_primitive([0, 0, 0], q, [0, 0, 0], 2.0, [1, 0, 0])
    assert v == pytest.approx(2.0 * np.exp(-0.5), abs=1e-12)
    assert v == pytest.approx(1.21306, abs=1e-5)


def test_eval_primitive_rotated_anisotropic():
    qz = axis_angle_to_quat([0, 0, np.pi / 2])
    v = eval_primitive([0, 0, 0], qz, np.log([2.0, 1.0, 1.0]), 1.0, [0, 2, 0])
    # explicit covariance inverted numerically
    R = oracles.rot(qz)
    cov = R @ np.diag([4.0, 1.0, 1.0]) @ R.T
    d = np.array([0, 2.0, 0])
    assert v == pytest.approx(np.exp(-0.5 * d @ np.linalg.inv(cov) @ d), abs=1e-12)
    assert v == pytest.approx(0.60653, abs=1e-5)


def test_eval_primitive_truncates_outside_support():
    s = np.log([1.0, 2.0, 0.5])
    assert eval_primitive([0, 0, 0], [1, 0, 0, 0], s, 1.0, [6.01, 0, 0]) == 0.0
    assert eval_primitive([0, 0, 0], [1, 0, 0, 0], s, 1.0, [5.99, 0, 0]) > 0.0


def test_empty_neighbourhood_is_zero():
    g = GaussianSet.isotropic([[0, 0, 0]], 1.0, 1.0)
    idx = build_index(g, ([-5] * 3, [5] * 3), 1.0)
    assert eval_volume(g, idx, [[4, 4, 4], [-3.1, 0, 0]]).tolist() == [0.0, 0.0]


def test_duplicate_primitive_doubles_value():
    rng = np.random.default_rng(0)
    g = _set(rng, 1)
    g2 = g.concatenate(g)
    pts = rng.uniform(-3, 3, (200, 3)) + g.centers[0]
    a = eval_volume(g, field_index(g, pts), pts)
    b = eval_volume(g2, field_index(g2, pts), pts)
    assert np.array_equal(b, 2 * a)


@pytest.mark.parametrize("seed", range(3))
def test_indexed_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    g = _set(rng, 40)
    pts = rng.uniform(-8, 8, (100, 3))
    ref = oracles.field(g.centers, g.rotations, g.log_scales, g.intensities, pts)
    got = eval_volume(g, field_index(g, pts), pts)
    assert np.max(np.abs(got - ref)) <= 1e-12 * max(1.0, np.abs(ref).max())


def test_union_is_sum():
    rng = np.random.default_rng(5)
    a, b = _set(rng, 15), _set(rng, 12)
    u = a.concatenate(b)
    pts = rng.uniform(-6, 6, (500, 3))
    va = eval_volume(a, field_index(a, pts), pts)
    vb = eval_volume(b, field_index(b, pts), pts)
    vu = eval_volume(u, field_index(u, pts), pts)
    np.testing.assert_allclose(vu, va + vb, rtol=0, atol=1e-13)


def test_truncation_error_bound():
    rng = np.random.default_rng(9)
    g = _set(rng, 30)
    pts = rng.uniform(-8, 8, (2000, 3))
    full_mask = np.ones((len(pts), g.count), dtype=bool)
    full = oracles.field(g.centers, g.rotations, g.log_scales, g.intensities, pts, full_mask)
    trunc = eval_volume(g, field_index(g, pts), pts)
    excluded = ~oracles.active_mask(g.centers, g.log_scales, pts)
    bound = excluded @ np.abs(g.intensities) * np.exp(-4.5)
    assert np.all(np.abs(full - trunc) <= bound + 1e-15)


def test_index_registration_single_primitive():
    g = GaussianSet.isotropic([[0.5, 0.5, 0.5]], 1.0, 1.0)
    idx = build_index(g, ([-5] * 3, [6] * 3), 1.0)
    # every cell whose box meets the 3 mm ball must list the primitive
    for a in range(idx.dims[0]):
        for b in range(idx.dims[1]):
            for c in range(idx.dims[2]):
                lo = idx.lo + idx.cell_size * np.array([a, b, c])
                hi = lo + idx.cell_size
                # border cells extend outward
                lo = np.where(np.array([a, b, c]) == 0, -np.inf, lo)
                hi = np.where(np.array([a, b, c]) == idx.dims - 1, np.inf, hi)
                nearest = np.clip(g.centers[0], lo, hi)
                meets = np.linalg.norm(nearest - g.centers[0]) <= 3.0
                cid = (a * idx.dims[1] + b) * idx.dims[2] + c
                listed = 0 in idx.cell_items[idx.cell_start[cid]:idx.cell_start[cid + 1]]
                if meets:
                    assert listed


def test_index_superset_random():
    rng = np.random.default_rng(2)
    g = _set(rng, 1000, spread=20.0, smin=0.3, smax=1.5)
    idx = build_index(g, ([-22] * 3, [22] * 3))
    r = g.support_radii()
    for x in rng.uniform(-24, 24, (1000, 3)):
        near = set(np.nonzero(np.linalg.norm(g.centers - x, axis=1) <= r)[0])
        assert near <= set(idx.query(x).tolist())
    for j in range(0, 1000, 50):
        assert j in idx.query(g.centers[j])


def test_build_index_rejects_bad_arguments():
    g = GaussianSet.isotropic([[0, 0, 0]], 1.0, 1.0)
    with pytest.raises(ValueError):
        build_index(g, ([0, 0, np.nan], [1, 1, 1]), 1.0)
    with pytest.raises(ValueError):
        build_index(g, ([0] * 3, [1] * 3), 0.0)
    with pytest.raises(ValueError):
        build_index(g, ([0] * 3, [1] * 3), np.inf)


def test_index_staleness_rule():
    g = GaussianSet.isotropic([[0, 0, 0], [3, 0, 0]], 1.0, 1.0)
    idx = build_index(g, ([-5] * 3, [8] * 3), 2.0, pad=0.5)
    g.centers[0, 0] += 0.4
    assert not idx.is_stale(g)
    g.centers[0, 0] += 0.2
    assert idx.is_stale(g)
    # stale-free moves keep evaluation exact
    g2 = GaussianSet.isotropic([[0, 0, 0], [3, 0, 0]], 1.0, 1.0)
    idx2 = build_index(g2, ([-5] * 3, [8] * 3), 2.0, pad=0.5)
    g2.centers += 0.2
    g2.log_scales += 0.02
    assert not idx2.is_stale(g2)
    pts = np.random.default_rng(0).uniform(-5, 8, (3000, 3))
    ref = oracles.field(g2.centers, g2.rotations, g2.log_scales, g2.intensities, pts)
    np.testing.assert_allclose(eval_volume(g2, idx2, pts), ref, rtol=0, atol=1e-13)


def test_backward_trivial_cases():
    g = GaussianSet.isotropic([[1, 2, 3]], 1.5, 0.8)
    pts = np.array([[1.0, 2.0, 3.0]])
    idx = field_index(g, pts)
    grads = eval_volume_backward(g, idx, pts, [1.0])
    assert grads.intensities[0] == pytest.approx(1.0)
    assert np.all(grads.centers == 0)
    z = eval_volume_backward(g, idx, pts, [0.0])
    for arr in z.groups().values():
        assert not arr.any()


@pytest.mark.parametrize("seed", range(6))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    J = int(rng.integers(1, 21))
    c, q, s, I = oracles.random_gaussians(rng, J, spread=2.0)
    pts = rng.uniform(-4, 4, (300, 3))
    up = rng.normal(size=len(pts))
    g = GaussianSet(c, q, s, I)
    grads = eval_volume_backward(g, field_index(g, pts), pts, up)
    mask = oracles.active_mask(c, s, pts)

    def f():
        return up @ oracles.field(c, q, s, I, pts, mask)

    for analytic, param in ((grads.centers, c), (grads.rotations, q), (grads.log_scales, s),
                            (grads.intensities, I)):
        fd = oracles.central_diff(f, param, h=1e-6)
        assert oracles.rel_err(analytic, fd) < 1e-4


def test_quaternion_gradient_is_tangent():
    rng = np.random.default_rng(3)
    g = _set(rng, 10, spread=1.0)
    pts = rng.uniform(-3, 3, (200, 3))
    grads = eval_volume_backward(g, field_index(g, pts), pts, rng.normal(size=200))
    np.testing.assert_allclose(np.sum(grads.rotations * g.rotations, axis=1), 0, atol=1e-12)


def test_spatial_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    g = _set(rng, 8, spread=1.0)
    pts = rng.uniform(-2, 2, (50, 3))
    _, dvdx = eval_volume_backward(g, field_index(g, pts), pts, np.ones(50), spatial=True)
    mask = oracles.active_mask(g.centers, g.log_scales, pts)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fp = oracles.field(g.centers, g.rotations, g.log_scales, g.intensities, pts + e, mask)
        fm = oracles.field(g.centers, g.rotations, g.log_scales, g.intensities, pts - e, mask)
        np.testing.assert_allclose(dvdx[:, k], (fp - fm) / (2 * h), atol=1e-7)


def test_rasterize_cases():
    grid = GridSpec((-4, -4, -4), (1, 1, 1), (9, 9, 9))
    empty = GaussianSet.empty()
    vol = rasterize_to_grid(empty, build_index(empty, grid.bounds(), 1.0), grid)
    assert not vol.data.any()
    g = GaussianSet.isotropic([[1, -2, 0]], 1.2, 0.9)
    vol = rasterize_to_grid(g, field_index(g, grid.points()), grid)
    assert vol.data[5, 2, 4] == 0.9
    rng = np.random.default_rng(1)
    g = _set(rng, 20)
    idx = field_index(g, grid.points())
    vol = rasterize_to_grid(g, idx, grid)
    per = np.array([eval_volume(g, idx, p[None])[0] for p in grid.points()])
    assert np.array_equal(vol.data.ravel(), per)
    with pytest.raises(ValueError):
        GridSpec((0, 0, 0), (1, 0, 1), (2, 2, 2))


def test_evaluation_is_deterministic_across_threads():
    rng = np.random.default_rng(8)
    g = _set(rng, 50)
    pts = rng.uniform(-6, 6, (5000, 3))
    idx = field_index(g, pts)
    up = rng.normal(size=len(pts))
    a = eval_volume(g, idx, pts, threads=1)
    b = eval_volume(g, idx, pts, threads=1)
    assert np.array_equal(a, b)
    g1 = eval_volume_backward(g, idx, pts, up, threads=2)
    g2 = eval_volume_backward(g, idx, pts, up, threads=2)
    for x, y in zip(g1.groups().values(), g2.groups().values()):
        assert np.array_equal(x, y)


def test_set_invariants_and_helpers():
    rng = np.random.default_rng(0)
    g = _set(rng, 12)
    g.check_invariants()
    cov = g.covariances()
    for C in cov[::3]:
        np.linalg.cholesky(C)
        np.testing.assert_allclose(C, C.T, atol=1e-12)
    g.log_scales[0] = 10
    g.clamp_scales(0.2, 30.0)
    g.check_invariants(0.2, 30.0)
    g.rotations[1] *= 3
    with pytest.raises(ValueError):
        g.check_invariants()
    g.normalize_rotations()
    g.check_invariants()
    with pytest.raises(ValueError):
        GaussianSet(np.zeros((2, 3)), np.zeros((1, 4)), np.zeros((2, 3)), np.zeros(2))
    assert g.subset([0, 2]).count == 2
    assert pack_primitives(g)[:, 16] == pytest.approx((CUTOFF * g.scales.max(axis=1)) ** 2)


def test_grads_container():
    rng = np.random.default_rng(0)
    g = _set(rng, 3)
    a = GaussianGrads.zeros_like(g)
    b = GaussianGrads.zeros_like(g)
    b.intensities[:] = 1
    a += b
    assert a.scaled(2).intensities.tolist() == [2, 2, 2]
    a.zero_()
    assert not a.intensities.any()


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 10_000))
def test_quaternion_scale_invariance(scale, seed):
    rng = np.random.default_rng(seed)
    g = _set(rng, 5, spread=1.0)
    pts = rng.uniform(-3, 3, (40, 3))
    h = g.copy()
    h.rotations *= scale
    a = eval_volume(g, field_index(g, pts), pts)
    b = eval_volume(h, field_index(h, pts), pts)
    np.testing.assert_allclose(a, b, atol=1e-12)
