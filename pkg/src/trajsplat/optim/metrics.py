"""Image metrics and the photometric loss, with analytic image gradients.

SSIM uses an 11x11 Gaussian window (sigma 1.5) applied separably with zero
padding, so the filter is self-adjoint and the gradient is three more
filtering passes.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from ..errors import ValidationError

WINDOW = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])


def _kernel():
    x = np.arange(WINDOW) - WINDOW // 2
    k = np.exp(-(x**2) / (2.0 * SIGMA**2))
    return k / k.sum()


_K = _kernel()


def _blur(x):
    y = correlate1d(x, _K, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, _K, axis=1, mode="constant", cval=0.0)


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def grayscale(image):
    return np.asarray(image, dtype=np.float64) @ LUMA


def psnr(a, b):
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    vx = exx - mx * mx
    vy = eyy - my * my
    cxy = exy - mx * my
    a1 = 2.0 * mx * my + C1
    a2 = 2.0 * cxy + C2
    b1 = mx * mx + my * my + C1
    b2 = vx + vy + C2
    return mx, my, a1, a2, b1, b2


def ssim_map(a, b):
    a, b = _check(a, b)
    _, _, a1, a2, b1, b2 = _ssim_terms(a, b)
    return (a1 * a2) / (b1 * b2)


def ssim(a, b):
    """Mean windowed SSIM over all pixels and channels."""
    return float(np.mean(ssim_map(a, b)))


def ssim_and_grad(x, y):
    """Mean SSIM of ``x`` against ``y`` and its gradient w.r.t. ``x``."""
    x, y = _check(x, y)
    mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = (a1 * a2) / (b1 * b2)
    d_mx = 2.0 * my * a2 / (b1 * b2) - 2.0 * mx * s / b1
    d_cxy = 2.0 * a1 / (b1 * b2)
    d_vx = -s / b2
    # moments E[x], E[x^2], E[xy] feed vx and cxy as well
    d_m1 = d_mx - 2.0 * mx * d_vx - my * d_cxy
    grad = _blur(d_m1) + 2.0 * x * _blur(d_vx) + y * _blur(d_cxy)
    return float(np.mean(s)), grad / s.size


def loss_photometric(rendered, target, lam):
    """(1 - lam) * L1 + lam * (1 - SSIM)."""
    rendered, target = _check(rendered, target)
    l1 = float(np.mean(np.abs(rendered - target)))
    return (1.0 - lam) * l1 + lam * (1.0 - ssim(rendered, target))


def photometric_and_grad(rendered, target, lam):
    rendered, target = _check(rendered, target)
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    g = (1.0 - lam) * np.sign(diff) / diff.size
    if lam > 0:
        s, gs = ssim_and_grad(rendered, target)
        g = g - lam * gs
    else:
        s = ssim(rendered, target)
    return (1.0 - lam) * l1 + lam * (1.0 - s), g
