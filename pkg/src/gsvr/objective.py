"""Self-supervised loss: per-slice L1 + λ1·D-SSIM, plus λ2·TV of the volume."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d


@dataclass
class LossConfig:
    lambda1: float = 0.2
    lambda2: float = 1e-4
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    dynamic_range: float = 1.0
    tv_crop: tuple = (64, 64, 64)
    tv_full: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 < 0:
            raise ValueError("loss.lambda1 must be >= 0")
        if self.lambda2 < 0:
            raise ValueError("loss.lambda2 must be >= 0")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("loss.ssim_window must be odd")
        if not self.ssim_sigma > 0:
            raise ValueError("loss.ssim_sigma must be positive")
        if not self.dynamic_range > 0:
            raise ValueError("loss.dynamic_range must be positive")
        self.tv_crop = tuple(int(c) for c in self.tv_crop)


@dataclass
class LossReport:
    total: float
    l1: float
    dssim: float
    tv: float
    per_slice_l1: np.ndarray
    per_slice_dssim: np.ndarray
    slice_grads: list = field(default_factory=list, repr=False)
    tv_grad: np.ndarray | None = field(default=None, repr=False)


def l1_loss(a, b):
    """Mean |a - b| and its gradient w.r.t. ``b`` (0 at ties)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = b - a
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _blur(img, g, mode="constant"):
    out = img
    for axis in range(img.ndim):
        out = correlate1d(out, g, axis=axis, mode=mode, cval=0.0)
    return out


def ssim_map(a, b, window=11, sigma=1.5, L=1.0, mode="constant"):
    """Local SSIM with a separable Gaussian window; returns the map and the
    filtered statistics needed for the gradient."""
    g = gaussian_window(window, sigma)
    C1 = (0.01 * L) ** 2
    C2 = (0.03 * L) ** 2
    mu_a = _blur(a, g, mode)
    mu_b = _blur(b, g, mode)
    e_aa = _blur(a * a, g, mode)
    e_bb = _blur(b * b, g, mode)
    e_ab = _blur(a * b, g, mode)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + C1
    n2 = 2 * cov + C2
    d1 = mu_a * mu_a + mu_b * mu_b + C1
    d2 = var_a + var_b + C2
    S = (n1 * n2) / (d1 * d2)
    return S, (g, mu_a, mu_b, n1, n2, d1, d2)


def dssim_loss(a, b, cfg: LossConfig | None = None):
    """(1 - mean SSIM) / 2 with zero-padded 'same' windows; gradient w.r.t. ``b``."""
    cfg = cfg or LossConfig()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    S, (g, mu_a, mu_b, n1, n2, d1, d2) = ssim_map(a, b, cfg.ssim_window, cfg.ssim_sigma,
                                                  cfg.dynamic_range)
    value = (1.0 - float(np.mean(S))) / 2.0
    # dS w.r.t. the filtered moments mu_b, E[b^2], E[ab]
    dS_dmu = S * (2 * mu_a / n1 - 2 * mu_a / n2 - 2 * mu_b / d1 + 2 * mu_b / d2)
    dS_dbb = -S / d2
    dS_dab = 2 * S / n2
    # zero-padded correlation with a symmetric kernel is self-adjoint
    grad = _blur(dS_dmu, g) + 2 * b * _blur(dS_dbb, g) + a * _blur(dS_dab, g)
    return value, grad * (-0.5 / S.size)


def tv_loss(volume):
    """Anisotropic TV: mean over voxels of sum_axes |forward difference|.

    The difference past the last voxel along each axis is zero.
    """
    x = np.asarray(volume, dtype=np.float64)
    total = 0.0
    grad = np.zeros_like(x)
    for axis in range(x.ndim):
        d = np.diff(x, axis=axis)
        total += float(np.sum(np.abs(d)))
        s = np.sign(d)
        lo = [slice(None)] * x.ndim
        hi = [slice(None)] * x.ndim
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        grad[tuple(hi)] += s
        grad[tuple(lo)] -= s
    return total / x.size, grad / x.size


def total_loss(acquired, recon, volume_crop, cfg: LossConfig) -> LossReport:
    """Full objective over a batch of slices.

    ``acquired`` and ``recon`` are sequences of 2D images; ``volume_crop`` is
    the rasterised crop used for TV (or None to skip it).
    """
    if len(acquired) != len(recon):
        raise ValueError("acquired and reconstructed slice counts differ")
    n = len(acquired)
    per_l1 = np.zeros(n)
    per_d = np.zeros(n)
    grads = []
    for i, (y, yh) in enumerate(zip(acquired, recon)):
        per_l1[i], gl = l1_loss(y, yh)
        g = gl
        if cfg.lambda1 > 0:
            per_d[i], gd = dssim_loss(y, yh, cfg)
            g = gl + cfg.lambda1 * gd
        grads.append(g / n)
    tv, tv_grad = 0.0, None
    if volume_crop is not None and cfg.lambda2 > 0:
        tv, tv_grad = tv_loss(volume_crop)
        tv_grad = cfg.lambda2 * tv_grad
    total = float(np.mean(per_l1 + cfg.lambda1 * per_d) + cfg.lambda2 * tv)
    return LossReport(total, float(np.mean(per_l1)), float(np.mean(per_d)), tv,
                      per_l1, per_d, grads, tv_grad)
