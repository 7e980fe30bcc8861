"""Adam, learning-rate schedule, Gaussian initialisation and stage transitions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .acquisition import SliceStack, forward_points, gather_points
from .config import ReconConfig
from .gaussians import GaussianSet, field_index


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def grow(self, name: str, n_rows: int) -> None:
        """Append zero moments for ``n_rows`` new parameter rows."""
        for buf in (self.m, self.v):
            old = buf[name]
            buf[name] = np.concatenate([old, np.zeros((n_rows,) + old.shape[1:])])

    def copy(self) -> "AdamState":
        return AdamState({k: v.copy() for k, v in self.m.items()},
                         {k: v.copy() for k, v in self.v.items()},
                         self.step, self.beta1, self.beta2, self.eps)


def adam_step(params: dict, grads: dict, state: AdamState, lr: dict,
              unit_norm=("rotation",)) -> dict:
    """Bias-corrected Adam update, in place.  Returns the applied steps."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    steps = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        step = -lr[name] * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p += step
        steps[name] = step
    for name in unit_norm:
        if name in params and params[name].size:
            p = params[name]
            p /= np.linalg.norm(p, axis=-1, keepdims=True)
    return steps


def lr_schedule(group: str, stage: int, iteration: int, cfg: ReconConfig) -> float:
    """Learning rate of ``group`` at ``iteration`` (0-based) within ``stage``.

    The mean rate decays exponentially over the concatenated iterations of
    all stages, reaching ``mean_end`` on the last one.  Other groups are
    constant, optionally overridden per stage.
    """
    if group == "mean":
        before = sum(s.iterations for s in cfg.stages[:stage])
        span = max(cfg.total_iterations - 1, 1)
        frac = min(max((before + iteration) / span, 0.0), 1.0)
        return cfg.lr.mean_start * (cfg.lr.mean_end / cfg.lr.mean_start) ** frac
    override = cfg.stages[stage].lr
    if group in override:
        return float(override[group])
    return float(getattr(cfg.lr, group))


# -- initialisation ---------------------------------------------------------

def lattice(lo, hi, budget: int):
    """Cell-centred lattice over [lo, hi] with about ``budget`` nodes.

    Returns (centers, per-axis spacing).  Degenerate (flat) axes get one node.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    ext = hi - lo
    tol = 1e-9 * max(float(ext.max()), 1.0)
    live = ext > tol
    if not live.any():
        return lo[None, :].copy(), np.ones(3)
    h = (np.prod(ext[live]) / budget) ** (1.0 / live.sum())
    n = np.where(live, np.maximum(1, np.round(ext / h)), 1).astype(int)
    spacing = np.where(live, ext / n, h)
    axes = [lo[k] + (np.arange(n[k]) + 0.5) * spacing[k] if live[k] else np.array([lo[k]])
            for k in range(3)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1), spacing


def lattice_scale(spacing, factor: float) -> float:
    return float(factor * np.exp(np.mean(np.log(spacing))))


def init_gaussians(stacks: SliceStack, budget: int, mode: str = "grid+backproject",
                   scale_factor: float = 0.75, transforms=None) -> GaussianSet:
    """Isotropic Gaussians on a lattice over the slice-union bounding box.

    With ``mode="grid+backproject"`` each intensity is the mean of the
    acquired samples nearest its centre (up to 16 within one lattice
    spacing); centres with no such sample start at 0.
    """
    if budget < 8:
        raise ValueError("budget must be >= 8")
    if stacks is None or not stacks.stacks or stacks.n_slices == 0:
        raise ValueError("no acquired slices to initialise from")
    pos, val = stacks.sample_positions(transforms)
    centers, spacing = lattice(pos.min(axis=0), pos.max(axis=0), budget)
    scale = lattice_scale(spacing, scale_factor)
    intens = np.zeros(len(centers))
    if mode == "grid+backproject":
        intens = nearest_sample_mean(pos, val, centers, float(spacing.max()))
    elif mode != "grid":
        raise ValueError(f"unknown init mode {mode!r}")
    return GaussianSet.isotropic(centers, scale, intens)


def nearest_sample_mean(pos, val, query, radius: float, k: int = 16):
    tree = cKDTree(pos)
    k = min(k, len(pos))
    dist, idx = tree.query(query, k=k, distance_upper_bound=radius)
    dist = dist.reshape(len(query), -1)
    idx = idx.reshape(len(query), -1)
    hit = np.isfinite(dist)
    vals = np.where(hit, np.asarray(val)[np.minimum(idx, len(pos) - 1)], 0.0)
    cnt = hit.sum(axis=1)
    return np.where(cnt > 0, vals.sum(axis=1) / np.maximum(cnt, 1), 0.0)


# -- rendering helpers shared with the reconstruction loop ----------------

def render_all(gset: GaussianSet, stacks: SliceStack, transforms, psfs, threads=1):
    """Forward every slice; returns a list (per stack) of (n, rows, cols)."""
    items = []
    for i, st in enumerate(stacks.stacks):
        items += [(st.geometry(k), transforms[i][k], psfs[i]) for k in range(st.n_slices)]
    sp = gather_points(items)
    if gset.count == 0:
        imgs = [np.zeros(s) for s in sp.shapes]
    else:
        idx = field_index(gset, sp.points)
        imgs = forward_points(gset, idx, sp, threads=threads)
    out, pos = [], 0
    for st in stacks.stacks:
        out.append(np.stack(imgs[pos:pos + st.n_slices]))
        pos += st.n_slices
    return out


def best_scale(target, pred) -> float:
    """Least-squares ``a`` minimising |target - a * pred|^2 (0 if pred is 0)."""
    t = np.concatenate([np.ravel(x) for x in target])
    p = np.concatenate([np.ravel(x) for x in pred])
    den = float(p @ p)
    return float(t @ p) / den if den > 0 else 0.0


def stage_transition(gset: GaussianSet, stacks: SliceStack, transforms, psfs, budget: int,
                     scale_factor: float = 0.75, threads: int = 1) -> GaussianSet:
    """Carry all primitives over; top up to ``budget`` at large residuals.

    New primitives sit at the pixel centres with the largest ``|y - ŷ|``
    (at most one per cell of the new lattice), with the lattice's isotropic
    scale and the signed residual as intensity, rescaled by one
    least-squares factor so their rendering best explains the residual.
    """
    out = gset.copy()
    extra = int(budget) - gset.count
    if extra <= 0:
        return out
    pred = render_all(gset, stacks, transforms, psfs, threads)
    resid = np.concatenate([(st.slices - p).ravel() for st, p in zip(stacks.stacks, pred)])
    pos, _ = stacks.sample_positions(transforms)
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    _, spacing = lattice(lo, hi, budget)
    scale = lattice_scale(spacing, scale_factor)

    order = np.argsort(-np.abs(resid), kind="stable")
    cell = np.floor((pos[order] - lo) / spacing).astype(np.int64)
    _, first = np.unique(cell, axis=0, return_index=True)
    chosen = order[np.sort(first)]
    if len(chosen) < extra:
        rest = np.setdiff1d(order, chosen, assume_unique=True)
        rest = rest[np.argsort(-np.abs(resid[rest]), kind="stable")]
        chosen = np.concatenate([chosen, rest[:extra - len(chosen)]])
    chosen = chosen[:extra]
    new = GaussianSet.isotropic(pos[chosen], scale, resid[chosen])
    if np.any(new.intensities != 0):
        pred_new = render_all(new, stacks, transforms, psfs, threads)
        resid_imgs = [st.slices - p for st, p in zip(stacks.stacks, pred)]
        new.intensities *= best_scale(resid_imgs, pred_new)
    return out.concatenate(new)
