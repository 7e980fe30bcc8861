"""Joint optimisation of Gaussian and per-slice motion parameters.

One call to :func:`reconstruct` runs initialisation, the coarse-to-fine
stage loop (render slices, loss, backward, Adam on six parameter groups)
and returns the field, the motion estimates and the loss trace.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acquisition import SliceStack, backward_points, build_psf, forward_points, gather_points
from .config import GROUPS, ReconConfig, to_dict, validate
from .gaussians import (GaussianSet, build_index, default_cell_size,
                        eval_volume, eval_volume_backward, pack_primitives)
from .objective import total_loss
from .optim import (AdamState, adam_step, best_scale, init_gaussians, lr_schedule, render_all,
                    stage_transition)
from .rigid import MotionParams, RigidTransform, axis_angle_to_quat, exp_update, quat_multiply
from .volume import GridSpec

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, stage: str):
        self.iteration = iteration
        self.stage = stage
        super().__init__(f"loss became non-finite at iteration {iteration} (stage {stage!r})")


@dataclass
class ReconResult:
    gaussians: GaussianSet
    transforms: list
    log: list
    grid: GridSpec
    intensity_scale: float
    config: ReconConfig = field(repr=False, default=None)

    def final_loss(self) -> float:
        its = [r for r in self.log if r.get("event") == "iter"]
        return its[-1]["total"] if its else float("nan")


def normalization_scale(stacks: SliceStack, percentile: float = 99.5) -> float:
    vals = np.concatenate([s.slices.ravel() for s in stacks.stacks])
    p = float(np.percentile(vals, percentile))
    return p if p > 0 and np.isfinite(p) else 1.0


def reconstruction_grid(stacks: SliceStack, spacing: float = 0.0) -> GridSpec:
    """Voxel grid covering the nominal slice union (PSF support excluded)."""
    pos, _ = stacks.sample_positions([[RigidTransform.identity()] * s.n_slices
                                      for s in stacks.stacks])
    if spacing <= 0:
        spacing = min(min(s.in_plane_spacing) for s in stacks.stacks)
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    dims = np.maximum(1, np.round((hi - lo) / spacing).astype(int) + 1)
    center = 0.5 * (lo + hi)
    origin = center - (dims - 1) / 2.0 * spacing
    return GridSpec(tuple(origin), (spacing,) * 3, tuple(int(d) for d in dims))


def initial_transforms(stacks: SliceStack, cfg: ReconConfig, rng) -> list:
    mc = cfg.motion
    if mc.init == "nominal":
        return [[RigidTransform.identity()] * s.n_slices for s in stacks.stacks]
    out = []
    for st in stacks.stacks:
        if st.truth is None:
            raise ValueError("oracle-perturbed initialisation needs ground-truth transforms")
        row = []
        for t in st.truth:
            w = np.radians(rng.uniform(-mc.perturb_rotation_deg, mc.perturb_rotation_deg, 3))
            d = rng.uniform(-mc.perturb_translation_mm, mc.perturb_translation_mm, 3)
            row.append(exp_update(t, MotionParams(w, d)))
        out.append(row)
    return out


class _Stage:
    """Per-stage constant data: downsampled stacks, PSFs, grid, slice list."""

    def __init__(self, stacks: SliceStack, factor: int, cfg: ReconConfig, base_grid: GridSpec):
        self.stacks = stacks.downsample(factor)
        pc = cfg.psf
        self.psfs = [build_psf(st.geometry(0), pc.samples, pc.inplane_fwhm_factor,
                               pc.through_plane_fwhm_factor) for st in self.stacks.stacks]
        self.grid = base_grid.coarsen(factor)
        self.refs = self.stacks.slice_refs()
        self.geoms = [self.stacks.stacks[i].geometry(k) for i, k in self.refs]
        self.images = [self.stacks.stacks[i].slices[k] for i, k in self.refs]
        reach = max(float(np.abs(p.sample_offsets).max()) for p in self.psfs)
        pos, _ = self.stacks.sample_positions([[RigidTransform.identity()] * s.n_slices
                                               for s in self.stacks.stacks])
        glo, ghi = self.grid.bounds()
        self.lo = np.minimum(pos.min(axis=0) - reach, glo)
        self.hi = np.maximum(pos.max(axis=0) + reach, ghi)


def _flat(transforms):
    return [t for row in transforms for t in row]


def _unflat(flat, stacks: SliceStack):
    out, pos = [], 0
    for st in stacks.stacks:
        out.append(list(flat[pos:pos + st.n_slices]))
        pos += st.n_slices
    return out


def _write_checkpoint(directory, gset, transforms, stacks, adam: AdamState, iteration: int):
    from . import formats

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    formats.write_gaussians(d / "checkpoint.ggau", gset)
    formats.write_transforms(d / "checkpoint_transforms.json", transforms)
    tmp = d / "checkpoint_adam.npz.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, step=adam.step, iteration=iteration, version=1,
                 **{f"m_{k}": v for k, v in adam.m.items()},
                 **{f"v_{k}": v for k, v in adam.v.items()})
    os.replace(tmp, d / "checkpoint_adam.npz")


def reconstruct(stacks: SliceStack, cfg: ReconConfig | None = None, log_path=None,
                checkpoint_dir=None, progress=None, initial: GaussianSet | None = None) -> ReconResult:
    """Self-supervised reconstruction from acquired stacks.

    Parameters
    ----------
    stacks : SliceStack
        Acquired slices with nominal geometry.  Their current ``transforms``
        are ignored; the motion estimate starts from ``cfg.motion.init``.
    cfg : ReconConfig
    log_path : path, optional
        JSON-lines run log; the effective config is the first record.
    checkpoint_dir : path, optional
        Where periodic checkpoints (GGAU + transform sidecar + Adam moments)
        are written atomically.
    initial : GaussianSet, optional
        Start from this field (in the stacks' intensity units) instead of
        the lattice initialisation.
    """
    cfg = validate(cfg or ReconConfig())
    if stacks is None or not stacks.stacks:
        raise ValueError("at least one stack is required")
    if cfg.stages[0].resolution < 1:
        raise ValueError("coarse stage resolution factor must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    log = []
    log_fh = open(log_path, "w") if log_path else None

    def emit(rec):
        log.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")

    emit({"event": "config", "config": to_dict(cfg)})
    scale_norm = normalization_scale(stacks)
    work = stacks.copy()
    for st in work.stacks:
        st.slices = st.slices / scale_norm
    base_grid = reconstruction_grid(work, cfg.volume_spacing)
    flat_t = _flat(initial_transforms(work, cfg, rng))
    n_slices = len(flat_t)
    pos, _ = work.sample_positions()
    ell = cfg.length_scale or 0.5 * float(np.max(pos.max(axis=0) - pos.min(axis=0)))
    motion_on = any(lr_schedule(g, s, 0, cfg) > 0 for g in ("motion_rotation", "motion_translation")
                    for s in range(len(cfg.stages)))
    gcfg = cfg.gaussians
    gset = None
    adam = None
    global_iter = 0

    try:
        for si, stage in enumerate(cfg.stages):
            sd = _Stage(work, stage.resolution, cfg, base_grid)
            transforms = _unflat(flat_t, sd.stacks)
            if gset is None and initial is not None:
                gset = initial.copy()
                gset.intensities /= scale_norm
                if gset.count < stage.budget:
                    gset = stage_transition(gset, sd.stacks, transforms, sd.psfs, stage.budget,
                                            gcfg.init_scale_factor, cfg.threads)
            elif gset is None:
                gset = init_gaussians(sd.stacks, stage.budget, gcfg.init_mode,
                                      gcfg.init_scale_factor, transforms)
                gset.clamp_scales(gcfg.scale_min, gcfg.scale_max)
                if gcfg.calibrate_intensity and gset.count:
                    pred = render_all(gset, sd.stacks, transforms, sd.psfs, cfg.threads)
                    a = best_scale([st.slices for st in sd.stacks.stacks], pred)
                    if a > 0:
                        gset.intensities *= a
            else:
                before = gset.count
                gset = stage_transition(gset, sd.stacks, transforms, sd.psfs, stage.budget,
                                        gcfg.init_scale_factor, cfg.threads)
                gset.clamp_scales(gcfg.scale_min, gcfg.scale_max)
                if adam is not None and gset.count > before:
                    for name in ("mean", "rotation", "scale", "intensity"):
                        adam.grow(name, gset.count - before)
            if adam is None:
                adam = AdamState.for_params({
                    "mean": gset.centers, "rotation": gset.rotations, "scale": gset.log_scales,
                    "intensity": gset.intensities, "motion_rotation": np.zeros((n_slices, 3)),
                    "motion_translation": np.zeros((n_slices, 3))})
            emit({"event": "stage", "stage": stage.name, "index": si, "resolution": stage.resolution,
                  "gaussians": gset.count, "iterations": stage.iterations})
            global_iter = _run_stage(sd, si, stage, cfg, gset, flat_t, adam, rng, ell, motion_on,
                                     global_iter, emit, checkpoint_dir, progress)
    finally:
        if log_fh:
            log_fh.close()

    gset.intensities *= scale_norm
    return ReconResult(gset, _unflat(flat_t, work), log, base_grid, scale_norm, cfg)


def _run_stage(sd: _Stage, si, stage, cfg: ReconConfig, gset: GaussianSet, flat_t: list,
               adam: AdamState, rng, ell, motion_on, global_iter, emit, checkpoint_dir, progress):
    gcfg = cfg.gaussians
    lc = cfg.loss
    n = len(sd.refs)
    batch = stage.batch_slices if 0 < stage.batch_slices < n else n
    crop = tuple(min(c, d) for c, d in zip(lc.tv_crop, sd.grid.dims))
    use_tv = lc.lambda2 > 0
    lr_mult = 1.0
    restarts = 0
    order = np.arange(n)
    cursor = n
    index = None
    snapshot = None
    trace = []
    it = 0
    while it < stage.iterations:
        if it % cfg.convergence.checkpoint_every == 0:
            snapshot = (it, gset.copy(), list(flat_t), adam.copy(), rng.bit_generator.state,
                        order.copy(), cursor, list(trace))
            if checkpoint_dir is not None and it > 0:
                _write_checkpoint(checkpoint_dir, gset, _unflat(flat_t, sd.stacks), sd.stacks,
                                  adam, global_iter)
        # slice batch: reshuffled epochs, or every slice in order
        if batch == n:
            sel = order
        else:
            if cursor + batch > n:
                order = rng.permutation(n)
                cursor = 0
            sel = order[cursor:cursor + batch]
            cursor += batch
        if index is None or index.is_stale(gset):
            h = default_cell_size(gset) * gcfg.cell_fraction
            h = max(h, float(np.max(sd.hi - sd.lo)) / 200.0)
            index = build_index(gset, (sd.lo, sd.hi), h, pad=gcfg.index_pad_fraction * h)
        prim = pack_primitives(gset)
        items = [(sd.geoms[j], flat_t[j], sd.psfs[sd.refs[j][0]]) for j in sel]
        crop_pts = crop_dims = None
        if use_tv:
            start = [int(rng.integers(0, d - c + 1)) for d, c in zip(sd.grid.dims, crop)]
            cg = sd.grid if lc.tv_full else sd.grid.crop(start, crop)
            crop_pts, crop_dims = cg.points(), cg.dims
        report, grads, mg = objective_and_gradients(gset, index, items, [sd.images[j] for j in sel],
                                                    lc, crop_pts, crop_dims, motion_on,
                                                    cfg.threads, prim)

        if not np.isfinite(report.total):
            restarts += 1
            if restarts > cfg.convergence.max_restarts or snapshot is None:
                raise DivergenceError(global_iter, stage.name)
            logger.warning("non-finite loss at iteration %d; restoring checkpoint and halving "
                           "learning rates", global_iter)
            s_it, s_g, s_t, s_a, s_rng, s_order, s_cursor, s_trace = snapshot
            emit({"event": "restart", "stage": stage.name, "iteration": global_iter,
                  "resume_from": global_iter - (it - s_it), "lr_multiplier": lr_mult * 0.5})
            global_iter -= it - s_it
            it = s_it
            _assign(gset, s_g)
            flat_t[:] = s_t
            fresh = s_a.copy()
            adam.m, adam.v, adam.step = fresh.m, fresh.v, fresh.step
            rng.bit_generator.state = s_rng
            order, cursor, trace = s_order.copy(), s_cursor, list(s_trace)
            lr_mult *= 0.5
            index = None
            continue

        motion_grad = np.zeros((n, 6))
        if mg is not None:
            motion_grad[sel] = mg
        lrs = {g: lr_schedule(g, si, it, cfg) * lr_mult for g in GROUPS}
        lrs["mean"] *= ell
        lrs["motion_translation"] *= ell
        params = {"mean": gset.centers, "rotation": gset.rotations, "scale": gset.log_scales,
                  "intensity": gset.intensities, "motion_rotation": np.zeros((n, 3)),
                  "motion_translation": np.zeros((n, 3))}
        g = {"mean": grads.centers, "rotation": grads.rotations, "scale": grads.log_scales,
             "intensity": grads.intensities, "motion_rotation": motion_grad[:, :3],
             "motion_translation": motion_grad[:, 3:]}
        adam_step(params, g, adam, lrs)
        gset.clamp_scales(gcfg.scale_min, gcfg.scale_max)
        if motion_on:
            dw, dt = params["motion_rotation"], params["motion_translation"]
            for j in range(n):
                if dw[j].any() or dt[j].any():
                    flat_t[j] = RigidTransform(quat_multiply(axis_angle_to_quat(dw[j]), flat_t[j].rotation),
                                               flat_t[j].translation + dt[j])
        rec = {"event": "iter", "iteration": global_iter, "stage": stage.name, "total": report.total,
               "l1": report.l1, "dssim": report.dssim, "tv": report.tv,
               "lr": {k: v for k, v in lrs.items()}}
        emit(rec)
        if progress is not None:
            progress(rec)
        trace.append(report.total)
        it += 1
        global_iter += 1
        w = cfg.convergence.window
        if cfg.convergence.rel_tol > 0 and len(trace) >= 2 * w:
            prev = np.mean(trace[-2 * w:-w])
            cur = np.mean(trace[-w:])
            if abs(prev - cur) <= cfg.convergence.rel_tol * abs(prev):
                emit({"event": "converged", "stage": stage.name, "iteration": global_iter})
                break
    return global_iter


def objective_and_gradients(gset: GaussianSet, index, items, images, loss_cfg, crop_points=None,
                            crop_dims=None, motion: bool = True, threads: int = 1, prim=None):
    """Loss over a batch of slices and its gradients.

    ``items`` lists (geometry, transform, psf) per slice and ``images`` the
    matching acquired slices.  TV is taken over the field sampled at
    ``crop_points`` (reshaped to ``crop_dims``).  Returns
    ``(LossReport, GaussianGrads, motion gradients (n, 6))``; the gradients
    are None when the loss is not finite.  Motion gradients are w.r.t. a
    left increment (rotation vector about the slice centre, translation).
    """
    if prim is None:
        prim = pack_primitives(gset)
    sp = gather_points(items)
    recon = forward_points(gset, index, sp, threads, prim)
    vol = None
    if crop_points is not None and loss_cfg.lambda2 > 0:
        vol = eval_volume(gset, index, crop_points, threads, prim).reshape(crop_dims)
    report = total_loss(images, recon, vol, loss_cfg)
    if not np.isfinite(report.total):
        return report, None, None
    grads, mg = backward_points(gset, index, sp, report.slice_grads, motion=motion,
                                threads=threads, prim=prim)
    if vol is not None and report.tv_grad is not None:
        grads += eval_volume_backward(gset, index, crop_points, report.tv_grad.ravel(),
                                      threads=threads, prim=prim)
    return report, grads, mg


def _assign(dst: GaussianSet, src: GaussianSet) -> None:
    dst.centers = src.centers.copy()
    dst.rotations = src.rotations.copy()
    dst.log_scales = src.log_scales.copy()
    dst.intensities = src.intensities.copy()
