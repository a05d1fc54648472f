"""Hematoxylin / Eosin / DAB color deconvolution (Beer-Lambert model)."""

from __future__ import annotations

import numpy as np

from .segmentation import otsu_threshold

# Ruifrok & Johnston optical-density vectors, rows H, E, DAB, normalized to unit length
_RAW = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ]
)
STAIN_MATRIX = _RAW / np.linalg.norm(_RAW, axis=1, keepdims=True)
UNMIX_MATRIX = np.linalg.inv(STAIN_MATRIX)
EPS = 1.0 / 255.0
STAINS = ("hematoxylin", "eosin", "dab")


def optical_density(rgb) -> np.ndarray:
    data = np.asarray(getattr(rgb, "data", rgb), dtype=np.float64)
    return -np.log10(np.maximum(data + EPS, 1e-12))


def color_deconvolution(rgb) -> np.ndarray:
    """Per-pixel H, E, DAB concentrations (``H x W x 3``), negatives clamped to 0."""
    od = optical_density(rgb)
    if od.shape[-1] != 3:
        raise ValueError("color deconvolution needs an RGB image")
    return np.maximum(od @ UNMIX_MATRIX, 0.0)


def concentrations_to_rgb(concentrations) -> np.ndarray:
    """Forward model inverse to :func:`color_deconvolution`: ``10^(-c S) - eps``.

    The result is not clipped, so very dense stains may dip slightly below
    zero; pass it through ``np.clip`` to obtain a displayable image.
    """
    c = np.asarray(concentrations, dtype=np.float64)
    return 10.0 ** (-(c @ STAIN_MATRIX)) - EPS


def ihc_dab_mask(image, min_signal: float = 0.05) -> np.ndarray:
    """DAB-positive pixels: deconvolve, min-max normalize DAB, Otsu, ``>=`` threshold.

    Images whose strongest DAB concentration is below ``min_signal`` carry no
    stain to segment and give an empty mask, as do constant DAB channels.
    """
    dab = color_deconvolution(image)[..., 2]
    lo, hi = float(dab.min()), float(dab.max())
    if hi < min_signal or hi - lo <= 0:
        return np.zeros(dab.shape, dtype=bool)
    norm = (dab - lo) / (hi - lo)
    res = otsu_threshold(norm)
    if res.degenerate:
        return np.zeros(dab.shape, dtype=bool)
    return norm >= res.threshold
