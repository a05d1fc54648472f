"""Deterministic translation at arbitrary output resolution."""

from __future__ import annotations

from fractions import Fraction
from typing import Optional, Union

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .implicit_head import ImplicitModel, predict_grid
from .imagecore import RasterImage, gather_windows, image_to_tensor, make_grid, tensor_to_image

DEFAULT_OVERLAP = 32


def output_size(height: int, width: int, scale) -> tuple[int, int]:
    s = Fraction(str(scale)) if not isinstance(scale, Fraction) else scale
    if s <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    out_h, out_w = round(s * height), round(s * width)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"scale {scale} maps a {height}x{width} image to an empty grid")
    return out_h, out_w


def _tile_starts(n: int, tile: int, overlap: int) -> list[int]:
    if tile >= n:
        return [0]
    step = tile - overlap
    starts = list(range(0, n - tile, step))
    starts.append(n - tile)
    return starts


def _nearest_axis(n_out: int, n_in: int) -> np.ndarray:
    centers = -1.0 + (2.0 * np.arange(n_out) + 1.0) / n_out
    return np.clip(np.floor((centers + 1.0) * n_in / 2.0), 0, n_in - 1).astype(np.int64)


def translate(
    image: RasterImage,
    model: Union[ImplicitModel, str],
    scale=1,
    tile: Optional[int] = None,
    overlap: int = DEFAULT_OVERLAP,
    batch_size: Optional[int] = 65536,
) -> RasterImage:
    """Render ``image`` in the target domain on a ``round(scale H) x round(scale W)`` grid.

    With ``tile`` set, the source is split into ``tile x tile`` crops that
    overlap by ``overlap`` pixels. Each crop is encoded separately, every
    output pixel is predicted by each crop containing its nearest source
    pixel (always with its global coordinate), and overlapping predictions
    are averaged.
    """
    if isinstance(model, str):
        model, _ = load_checkpoint(model)
    out_h, out_w = output_size(image.height, image.width, scale)
    if tile is None or tile >= max(image.height, image.width):
        return predict_grid(image, make_grid(out_h, out_w), model, batch_size)
    if not 0 <= overlap < tile:
        raise ValueError(f"overlap must lie in [0, tile), got {overlap} for tile {tile}")

    dtype = model.dtype
    src = image_to_tensor(image, dtype=dtype)
    grid = torch.as_tensor(make_grid(out_h, out_w).coords.copy(), dtype=dtype)
    near_r = _nearest_axis(out_h, image.height)
    near_c = _nearest_axis(out_w, image.width)
    acc = torch.zeros(model.cfg.out_channels, out_h, out_w, dtype=dtype)
    count = torch.zeros(out_h, out_w, dtype=dtype)
    with torch.no_grad():
        for y0 in _tile_starts(image.height, tile, overlap):
            y1 = min(y0 + tile, image.height)
            rows_out = np.nonzero((near_r >= y0) & (near_r < y1))[0]
            for x0 in _tile_starts(image.width, tile, overlap):
                x1 = min(x0 + tile, image.width)
                cols_out = np.nonzero((near_c >= x0) & (near_c < x1))[0]
                if rows_out.size == 0 or cols_out.size == 0:
                    continue
                feats = model.encode(src[:, :, y0:y1, x0:x1])
                rr, cc = np.meshgrid(rows_out, cols_out, indexing="ij")
                rr, cc = rr.ravel(), cc.ravel()
                local_r = torch.as_tensor(near_r[rr] - y0)[None]
                local_c = torch.as_tensor(near_c[cc] - x0)[None]
                coords = grid[torch.as_tensor(rr), torch.as_tensor(cc)][None]
                step = batch_size or coords.shape[1]
                preds = []
                for i in range(0, coords.shape[1], step):
                    win = gather_windows(feats, local_r[:, i : i + step], local_c[:, i : i + step], model.cfg.radius)
                    preds.append(model.head(win, coords[:, i : i + step]))
                pred = torch.cat(preds, dim=1)[0]
                acc[:, rr, cc] += pred.T
                count[rr, cc] += 1
    return tensor_to_image(acc / count)
