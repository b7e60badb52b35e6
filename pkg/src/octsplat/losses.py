"""Image losses and metrics with analytic gradients."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 99.0


class SizeMismatch(ValueError):
    pass


def _pixels(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img), dtype=float)


def _pair(img, target):
    a, b = _pixels(img), _pixels(target)
    if a.shape != b.shape:
        raise SizeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def l1_mean(img, target) -> tuple[float, np.ndarray]:
    a, b = _pair(img, target)
    return float(np.mean(np.abs(a - b))), np.sign(a - b) / a.size


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _blur(x, w):
    # symmetric kernel with zero padding, so this operator is its own adjoint
    return correlate1d(correlate1d(x, w, axis=0, mode="constant"), w, axis=1, mode="constant")


def ssim(img, target, with_grad: bool = False):
    """Mean SSIM over pixels and channels with an 11-tap Gaussian window (sigma 1.5)
    and zero padding. With `with_grad`, also returns dSSIM/dimg."""
    x, y = _pair(img, target)
    w = gaussian_window()
    mx, my = _blur(x, w), _blur(y, w)
    sxx = _blur(x * x, w) - mx * mx
    syy = _blur(y * y, w) - my * my
    sxy = _blur(x * y, w) - mx * my
    A1, A2 = 2 * mx * my + SSIM_C1, 2 * sxy + SSIM_C2
    B1, B2 = mx * mx + my * my + SSIM_C1, sxx + syy + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    value = float(S.mean())
    if not with_grad:
        return value
    n = S.size
    d_mx = (2 * my * A2 / (B1 * B2) - S * 2 * mx / B1) / n
    d_sxy = 2 * A1 / (B1 * B2) / n
    d_sxx = -S / B2 / n
    d_mx = d_mx - 2 * mx * d_sxx - my * d_sxy
    grad = _blur(d_mx, w) + 2 * x * _blur(d_sxx, w) + y * _blur(d_sxy, w)
    return value, grad


def psnr(img, target) -> float:
    a, b = _pair(img, target)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(1.0 / mse))


def render_loss(img, target, lam_ssim: float = 0.2) -> tuple[float, np.ndarray, dict]:
    """L1 (mean over pixels and channels) + lam_ssim * (1 - SSIM).

    Returns (loss, d loss / d img, parts) where parts holds the two terms."""
    l1, g = l1_mean(img, target)
    parts = {"l1": l1, "ssim": 1.0}
    if lam_ssim:
        s, gs = ssim(img, target, with_grad=True)
        parts["ssim"] = s
        return l1 + lam_ssim * (1 - s), g - lam_ssim * gs, parts
    return l1, g, parts
