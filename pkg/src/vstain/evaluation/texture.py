"""PSNR / SSIM / MSE on 8-bit-quantized intensities."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 100.0
_DATA_RANGE = 255.0


def quantize(image) -> np.ndarray:
    """[0, 1] floats to 0..255 integer levels (as float64), rounding half up."""
    data = np.asarray(getattr(image, "data", image), dtype=np.float64)
    return np.floor(np.clip(data, 0.0, 1.0) * 255.0 + 0.5)


def _pair(pred, ref):
    p, r = quantize(pred), quantize(ref)
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {r.shape}")
    if p.ndim == 2:
        p, r = p[:, :, None], r[:, :, None]
    return p, r


def mse(pred, ref) -> float:
    p, r = _pair(pred, ref)
    return float(np.mean((p - r) ** 2))


def psnr_from_mse(value: float) -> float:
    if value == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(_DATA_RANGE**2 / value)))


def psnr(pred, ref) -> float:
    return psnr_from_mse(mse(pred, ref))


def _ssim_channel(x: np.ndarray, y: np.ndarray, sigma: float, truncate: float) -> float:
    c1 = (0.01 * _DATA_RANGE) ** 2
    c2 = (0.03 * _DATA_RANGE) ** 2

    def blur(a):
        return gaussian_filter(a, sigma=sigma, truncate=truncate)

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    s = num / den
    pad = int(truncate * sigma + 0.5)
    if s.shape[0] > 2 * pad and s.shape[1] > 2 * pad:
        s = s[pad:-pad, pad:-pad]
    return float(s.mean())


def ssim(pred, ref, sigma: float = 1.5) -> float:
    """Gaussian-window SSIM (11 x 11 at sigma 1.5), averaged over channels.

    Border pixels within the window radius are excluded from the mean when
    the image is large enough to leave an interior.
    """
    p, r = _pair(pred, ref)
    # truncate 3.5 gives a radius-5 (11 x 11) kernel at sigma 1.5
    return float(np.mean([_ssim_channel(p[..., k], r[..., k], sigma, 3.5) for k in range(p.shape[2])]))


def texture_metrics(pred, ref) -> dict:
    value = mse(pred, ref)
    return {"psnr": psnr_from_mse(value), "ssim": ssim(pred, ref), "mse": value}
