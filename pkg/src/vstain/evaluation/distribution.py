"""Frechet distance between Gaussian fits of embedded image sets.

The embedder is any callable mapping one image to a fixed-length vector.
:class:`StatsEmbedder` is a small hand-crafted default that needs no
weights; an Inception-style network can be plugged in instead.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

REGULARIZATION = 1e-6


class StatsEmbedder:
    """Color, contrast, edge-strength and intensity-histogram statistics.

    Per channel: mean, standard deviation, mean absolute horizontal and
    vertical gradient. Plus an 8-bin histogram of the channel-mean
    intensity. Blurry renderings lose gradient energy and shift histogram
    mass toward mid-tones, so this embedding reacts to the artifacts
    distribution metrics are meant to catch.
    """

    id = "stats-v1"

    def __init__(self, bins: int = 8):
        self.bins = bins

    def __call__(self, image) -> np.ndarray:
        data = np.asarray(getattr(image, "data", image), dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        flat = data.reshape(-1, data.shape[2])
        gx = np.abs(np.diff(data, axis=1)).reshape(-1, data.shape[2]).mean(axis=0) if data.shape[1] > 1 else np.zeros(data.shape[2])
        gy = np.abs(np.diff(data, axis=0)).reshape(-1, data.shape[2]).mean(axis=0) if data.shape[0] > 1 else np.zeros(data.shape[2])
        hist, _ = np.histogram(np.clip(data.mean(axis=2), 0, 1), bins=self.bins, range=(0.0, 1.0))
        return np.concatenate([flat.mean(axis=0), flat.std(axis=0), gx, gy, hist / hist.sum()])


def identity_embedder(image) -> np.ndarray:
    """Flattened pixel values; useful for tiny images and closed-form checks."""
    return np.asarray(getattr(image, "data", image), dtype=np.float64).ravel()


identity_embedder.id = "identity"


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def _gaussian_fit(x: np.ndarray, regularize: bool):
    mu = x.mean(axis=0)
    if x.shape[0] > 1:
        sigma = np.atleast_2d(np.cov(x, rowvar=False))
    else:
        sigma = np.zeros((x.shape[1], x.shape[1]))
    if regularize:
        sigma = sigma + REGULARIZATION * np.eye(sigma.shape[0])
    return mu, sigma


def frechet_distance(emb_a, emb_b) -> tuple[float, bool]:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` and whether covariances were regularized.

    Covariances get ``+1e-6 I`` when either set has fewer samples than
    embedding dimensions.
    """
    a = np.atleast_2d(np.asarray(emb_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(emb_b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both embedding sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"embedding dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    dim = a.shape[1]
    regularize = min(a.shape[0], b.shape[0]) < dim
    mu_a, s_a = _gaussian_fit(a, regularize)
    mu_b, s_b = _gaussian_fit(b, regularize)
    root_a = _sqrt_psd(s_a)
    cross = np.linalg.eigvalsh(root_a @ s_b @ root_a)
    tr_cross = np.sqrt(np.clip(cross, 0, None)).sum()
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(s_a) + np.trace(s_b) - 2.0 * tr_cross)
    return max(value, 0.0), regularize


def distribution_metrics(
    pred_set: Sequence, ref_set: Sequence, embedder: Optional[Callable] = None
) -> dict:
    if len(pred_set) == 0 or len(ref_set) == 0:
        raise ValueError("both image sets must be non-empty")
    embedder = embedder or StatsEmbedder()
    emb_p = np.stack([np.asarray(embedder(img), dtype=np.float64).ravel() for img in pred_set])
    emb_r = np.stack([np.asarray(embedder(img), dtype=np.float64).ravel() for img in ref_set])
    fid, regularized = frechet_distance(emb_p, emb_r)
    embedder_id = getattr(embedder, "id", getattr(embedder, "__name__", type(embedder).__name__))
    return {"fid": fid, "embedder_id": str(embedder_id), "covariance_regularized": regularized}
