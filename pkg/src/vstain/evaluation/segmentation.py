"""Positive-pixel masks and overlap / boundary metrics.

Empty-mask conventions (the metrics are otherwise undefined):

* both masks empty: dice = iou = 1, hd = 0
* exactly one empty: dice = iou = 0, hd = image diagonal
* tpr with no reference positives is 1; tnr with no reference negatives is 1
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

N_BINS = 256

# red, green, blue planes of the multiplexed immunofluorescence image
MIF_CHANNELS = {"dapi": 0, "panck": 1, "cd3": 2}

CONVENTIONS = {
    "both_empty": {"dice": 1.0, "iou": 1.0, "hd": 0.0},
    "one_empty": {"dice": 0.0, "iou": 0.0, "hd": "image diagonal"},
    "tpr_without_reference_positives": 1.0,
    "tnr_without_reference_negatives": 1.0,
    "hausdorff": "maximum symmetric, Euclidean, pixels",
}


@dataclass(frozen=True)
class OtsuResult:
    threshold: float
    degenerate: bool = False


def histogram_bins(gray) -> np.ndarray:
    """Bin index ``min(floor(v * 256), 255)`` of every pixel."""
    g = np.clip(np.asarray(gray, dtype=np.float64), 0.0, 1.0)
    return np.minimum(np.floor(g * N_BINS), N_BINS - 1).astype(np.int64)


def otsu_threshold(gray) -> OtsuResult:
    """Threshold maximizing between-class variance over a 256-bin histogram.

    Pixels in bins ``>= t`` form the upper class and the returned threshold
    is ``t / 256``, so ``value >= threshold`` reproduces the split exactly.
    Ties go to the lowest ``t``. A single occupied bin is degenerate: the
    threshold is that value and callers should produce an empty mask.
    """
    g = np.asarray(gray, dtype=np.float64)
    if g.size == 0:
        raise ValueError("cannot threshold an empty image")
    bins = histogram_bins(g)
    counts = np.bincount(bins.ravel(), minlength=N_BINS).astype(np.int64)
    if np.count_nonzero(counts) < 2:
        return OtsuResult(float(g.flat[0]), degenerate=True)
    levels = np.arange(N_BINS, dtype=np.int64)
    n0 = np.cumsum(counts)[:-1]  # class sizes for t = 1..255
    s0 = np.cumsum(counts * levels)[:-1]
    n, s = counts.sum(), (counts * levels).sum()
    n1, s1 = n - n0, s - s0
    valid = (n0 > 0) & (n1 > 0)
    # N^2 * between-class variance = (s0 n1 - s1 n0)^2 / (n0 n1); exact integers up to the division
    diff = (s0 * n1 - s1 * n0).astype(np.float64)
    score = np.full(N_BINS - 1, -1.0)
    score[valid] = diff[valid] ** 2 / (n0[valid].astype(np.float64) * n1[valid])
    t = int(np.argmax(score)) + 1
    return OtsuResult(t / N_BINS, degenerate=False)


def otsu_mask(gray) -> np.ndarray:
    g = np.asarray(gray, dtype=np.float64)
    res = otsu_threshold(g)
    if res.degenerate:
        return np.zeros(g.shape, dtype=bool)
    return histogram_bins(g) >= round(res.threshold * N_BINS)


def clean_mask(mask: np.ndarray, dilation_size: int = 3, dilation_iterations: int = 1, median_size: int = 3) -> np.ndarray:
    """Square dilation followed by a median filter."""
    out = np.asarray(mask, dtype=bool)
    if dilation_iterations > 0 and out.any():
        structure = np.ones((dilation_size, dilation_size), dtype=bool)
        out = ndimage.binary_dilation(out, structure=structure, iterations=dilation_iterations)
    if median_size > 1:
        out = ndimage.median_filter(out.astype(np.uint8), size=median_size) > 0
    return out


def mif_channel_masks(image, dilation_size: int = 3, dilation_iterations: int = 1, median_size: int = 3) -> dict:
    """Per-stain masks of a 3-channel mIF image (DAPI red, PanCK green, CD3 blue)."""
    data = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"mIF masks need a 3-channel image, got shape {data.shape}")
    return {
        name: clean_mask(otsu_mask(data[:, :, k]), dilation_size, dilation_iterations, median_size)
        for name, k in MIF_CHANNELS.items()
    }


def _directed_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """``max_{p in a} min_{q in b} |p - q|`` via the exact Euclidean distance transform."""
    dist_to_b = ndimage.distance_transform_edt(~b)
    return float(dist_to_b[a].max())


def hausdorff(pred: np.ndarray, ref: np.ndarray) -> float:
    p, r = np.asarray(pred, dtype=bool), np.asarray(ref, dtype=bool)
    if p.shape != r.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {r.shape}")
    if not p.any() and not r.any():
        return 0.0
    if not p.any() or not r.any():
        return float(np.hypot(*p.shape))
    return max(_directed_hausdorff(p, r), _directed_hausdorff(r, p))


def segmentation_metrics(pred, ref) -> dict:
    p, r = np.asarray(pred, dtype=bool), np.asarray(ref, dtype=bool)
    if p.shape != r.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {r.shape}")
    inter = int(np.count_nonzero(p & r))
    union = int(np.count_nonzero(p | r))
    np_, nr = int(p.sum()), int(r.sum())
    if np_ + nr == 0:
        dice = iou = 1.0
    else:
        dice = 2.0 * inter / (np_ + nr)
        iou = inter / union
    neg_ref = r.size - nr
    tpr = inter / nr if nr else 1.0
    tnr = int(np.count_nonzero(~p & ~r)) / neg_ref if neg_ref else 1.0
    return {"dice": dice, "iou": iou, "hd": hausdorff(p, r), "tpr": tpr, "tnr": tnr}
