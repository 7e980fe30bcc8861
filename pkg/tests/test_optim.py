import numpy as np
import pytest

from gsvr.acquisition import SliceStack, build_psf, make_stack_geometry
from gsvr.config import StageConfig, from_dict
from gsvr.gaussians import GaussianSet
from gsvr.optim import (AdamState, adam_step, best_scale, init_gaussians, lattice, lr_schedule,
                        render_all, stage_transition)
from gsvr.rigid import RigidTransform


def _stacks(value=0.5, n=6, size=12):
    st = make_stack_geometry("axial", [0, 0, 0], 2.0, size, size, 4.0, n)
    st = st.copy(slices=np.full((n, size, size), value))
    return SliceStack([st])


def test_adam_first_step_is_lr_times_sign():
    p = {"a": np.array([1.0, -2.0, 3.0])}
    g = {"a": np.array([0.5, -4.0, 0.0])}
    state = AdamState.for_params(p)
    steps = adam_step(p, g, state, {"a": 0.1})
    np.testing.assert_allclose(steps["a"], [-0.1, 0.1, 0.0], atol=1e-7)
    assert state.step == 1


def test_adam_minimises_a_quadratic():
    target = np.array([3.0, -1.0, 0.25])
    p = {"x": np.zeros(3)}
    state = AdamState.for_params(p)
    for _ in range(3000):
        adam_step(p, {"x": 2 * (p["x"] - target)}, state, {"x": 0.01})
    np.testing.assert_allclose(p["x"], target, atol=1e-3)


def test_adam_renormalises_rotations_and_checks_shapes():
    p = {"rotation": np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])}
    state = AdamState.for_params(p)
    adam_step(p, {"rotation": np.ones((2, 4))}, state, {"rotation": 0.3})
    np.testing.assert_allclose(np.linalg.norm(p["rotation"], axis=1), 1.0)
    with pytest.raises(ValueError):
        adam_step(p, {"rotation": np.ones((3, 4))}, state, {"rotation": 0.3})


def test_adam_grow_keeps_old_moments():
    p = {"a": np.ones((2, 3))}
    state = AdamState.for_params(p)
    adam_step(p, {"a": np.ones((2, 3))}, state, {"a": 0.1})
    m_old = state.m["a"].copy()
    state.grow("a", 4)
    assert state.m["a"].shape == (6, 3)
    np.testing.assert_array_equal(state.m["a"][:2], m_old)
    assert not state.v["a"][2:].any()
    c = state.copy()
    c.m["a"][0, 0] = 99
    assert state.m["a"][0, 0] != 99


def test_mean_schedule_is_exponential_over_all_stages():
    cfg = from_dict({"stages": [{"name": "a", "resolution": 2, "iterations": 5, "budget": 8},
                                {"name": "b", "resolution": 1, "iterations": 6, "budget": 8,
                                 "lr": {"intensity": 0.5}}],
                     "lr": {"mean_start": 1e-2, "mean_end": 1e-4}})
    assert lr_schedule("mean", 0, 0, cfg) == pytest.approx(1e-2)
    assert lr_schedule("mean", 1, 5, cfg) == pytest.approx(1e-4)
    # iteration 5 of 11 is the midpoint, so the geometric mean
    assert lr_schedule("mean", 1, 0, cfg) == pytest.approx(1e-3)
    vals = [lr_schedule("mean", 0, i, cfg) for i in range(5)]
    ratios = np.array(vals[1:]) / np.array(vals[:-1])
    np.testing.assert_allclose(ratios, ratios[0])
    assert lr_schedule("intensity", 0, 3, cfg) == cfg.lr.intensity
    assert lr_schedule("intensity", 1, 3, cfg) == 0.5


def test_lattice_counts_and_flat_axes():
    c, sp = lattice([0, 0, 0], [10, 10, 10], 1000)
    assert len(c) == 1000
    np.testing.assert_allclose(sp, 1.0)
    c, sp = lattice([0, 0, 5], [8, 2, 5], 16)
    assert np.all(c[:, 2] == 5)
    assert len(c) == 16


def test_init_backprojects_constant_intensity():
    stacks = _stacks(0.5)
    g = init_gaussians(stacks, 200)
    assert abs(g.count - 200) <= 40
    np.testing.assert_allclose(g.intensities, 0.5)
    assert np.allclose(g.log_scales, g.log_scales[0, 0])
    z = init_gaussians(stacks, 200, mode="grid")
    assert not z.intensities.any()
    with pytest.raises(ValueError):
        init_gaussians(stacks, 4)
    with pytest.raises(ValueError):
        init_gaussians(stacks, 200, mode="random")


def test_best_scale():
    a = [np.array([2.0, 4.0]), np.array([[6.0]])]
    b = [np.array([1.0, 2.0]), np.array([[3.0]])]
    assert best_scale(a, b) == pytest.approx(2.0)
    assert best_scale(a, [np.zeros(2), np.zeros((1, 1))]) == 0.0


def test_stage_transition_tops_up_at_residual_peaks():
    stacks = _stacks(0.0)
    st = stacks.stacks[0]
    st.slices[2, 5, 7] = 1.0
    psfs = [build_psf(st.geometry(0), (1, 1, 1))]
    ts = [[RigidTransform()] * st.n_slices]
    base = GaussianSet.isotropic([[0.0, 0.0, 0.0]], 1.0, 0.0)
    out = stage_transition(base, stacks, ts, psfs, budget=20)
    assert out.count == 20
    np.testing.assert_array_equal(out.centers[0], base.centers[0])
    peak = st.geometry(2).nominal_pose.apply(st.geometry(2).pixel_grid()[5 * 12 + 7])
    np.testing.assert_allclose(out.centers[1], peak)
    assert out.intensities[1] > 0
    # no-op when the budget is already met
    assert stage_transition(out, stacks, ts, psfs, budget=10).count == 20


def test_render_all_shapes():
    stacks = _stacks(0.3, n=3)
    st = stacks.stacks[0]
    psfs = [build_psf(st.geometry(0), (1, 1, 3))]
    g = init_gaussians(stacks, 100)
    out = render_all(g, stacks, [[RigidTransform()] * 3], psfs)
    assert out[0].shape == (3, 12, 12)
    empty = render_all(GaussianSet.empty(), stacks, [[RigidTransform()] * 3], psfs)
    assert not empty[0].any()


def test_stage_defaults():
    s = StageConfig()
    assert s.resolution == 1 and s.batch_slices == 0
