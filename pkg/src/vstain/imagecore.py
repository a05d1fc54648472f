"""Raster images, normalized coordinate grids and neighborhood windows.

Coordinates follow the cell-center convention on [-1, 1]: pixel ``(i, j)`` of
an ``H x W`` raster sits at ``(x_j, y_i) = (-1 + (2j + 1) / W, -1 + (2i + 1) / H)``.
Grids of different resolution therefore sample the same continuous domain,
which is what makes rendering at a finer grid than the source meaningful.

Window vectors are flattened channel-major, then row-major inside the
``(2r + 1) x (2r + 1)`` window: element ``c * k * k + dy * k + dx`` holds
channel ``c`` at offset ``(dy - r, dx - r)``. Neighbors outside the raster are
replicated from the nearest edge pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch

__all__ = [
    "RasterImage",
    "CoordinateGrid",
    "FeatureMap",
    "make_grid",
    "nearest_pixel",
    "nearest_indices",
    "extract_window",
    "gather_windows",
    "read_image",
    "write_image",
    "image_to_tensor",
    "tensor_to_image",
]

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class RasterImage:
    """An ``H x W x c`` float image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"expected an H x W x c array, got shape {data.shape}")
        h, w, c = data.shape
        if h < 1 or w < 1:
            raise ValueError(f"image dimensions must be positive, got {h}x{w}")
        if c not in (1, 3):
            raise ValueError(f"images must have 1 or 3 channels, got {c}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def clipped(cls, array) -> "RasterImage":
        """Build an image from raw values, clamping them into [0, 1]."""
        return cls(np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class CoordinateGrid:
    """Normalized sample locations; ``coords[i, j] = (x_j, y_i)``."""

    coords: np.ndarray

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    def flat(self) -> np.ndarray:
        """Row-major ``(H' * W') x 2`` copy of the coordinates."""
        return self.coords.reshape(-1, 2).copy()


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense ``C x H x W`` per-pixel embedding."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"expected a C x H x W array, got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def _axis_centers(n: int) -> np.ndarray:
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def make_grid(height: int, width: int) -> CoordinateGrid:
    """Cell-center coordinate grid of ``height x width`` samples."""
    if height < 1 or width < 1:
        raise ValueError(f"grid dimensions must be positive, got {height}x{width}")
    ys = _axis_centers(height)
    xs = _axis_centers(width)
    coords = np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1)
    coords.setflags(write=False)
    return CoordinateGrid(coords)


def _nearest(v, n):
    # round half up, then clamp: coordinates outside [-1, 1] snap to the border
    idx = np.floor((v + 1.0) * n / 2.0 - 0.5 + 0.5).astype(np.int64)
    return np.clip(idx, 0, n - 1)


def nearest_pixel(coord, height: int, width: int) -> tuple[int, int]:
    """Return ``(row, col)`` of the pixel whose center is nearest to ``coord``.

    ``coord`` is ``(x, y)``. Out-of-range coordinates are clamped to the
    boundary rather than rejected.
    """
    x, y = float(coord[0]), float(coord[1])
    return int(_nearest(np.float64(y), height)), int(_nearest(np.float64(x), width))


def nearest_indices(coords: torch.Tensor, height: int, width: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Vectorized :func:`nearest_pixel` for a ``(..., 2)`` coordinate tensor."""
    x = coords[..., 0]
    y = coords[..., 1]
    cols = torch.floor((x + 1.0) * (width / 2.0)).long().clamp_(0, width - 1)
    rows = torch.floor((y + 1.0) * (height / 2.0)).long().clamp_(0, height - 1)
    return rows, cols


def gather_windows(features: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor, radius: int) -> torch.Tensor:
    """Collect flattened neighborhood windows for a batch of pixel indices.

    Args:
        features: ``B x C x H x W`` feature tensor.
        rows, cols: ``B x N`` integer pixel indices.
        radius: window radius ``r``.

    Returns:
        ``B x N x C(2r+1)^2`` tensor in the module's window ordering.
    """
    if radius < 0:
        raise ValueError(f"window radius must be non-negative, got {radius}")
    b, c, h, w = features.shape
    offsets = torch.arange(-radius, radius + 1, device=features.device)
    k = offsets.numel()
    # B x K x K x N, replicate padding by clamping the shifted indices
    rr = (rows[:, None, None, :] + offsets[None, :, None, None]).clamp(0, h - 1)
    cc = (cols[:, None, None, :] + offsets[None, None, :, None]).clamp(0, w - 1)
    flat_idx = (rr * w + cc).reshape(b, 1, -1).expand(b, c, -1)
    picked = torch.gather(features.reshape(b, c, h * w), 2, flat_idx)
    n = rows.shape[1]
    return picked.reshape(b, c * k * k, n).transpose(1, 2)


def extract_window(featmap: FeatureMap, pixel: tuple[int, int], radius: int) -> np.ndarray:
    """Flattened ``(2r+1) x (2r+1)`` window of ``featmap`` centered on ``pixel``."""
    if radius < 0:
        raise ValueError(f"window radius must be non-negative, got {radius}")
    row, col = pixel
    if not (0 <= row < featmap.height and 0 <= col < featmap.width):
        raise IndexError(f"pixel {pixel} outside a {featmap.height}x{featmap.width} map")
    feats = torch.as_tensor(np.ascontiguousarray(featmap.data))[None]
    rows = torch.tensor([[row]])
    cols = torch.tensor([[col]])
    return gather_windows(feats, rows, cols, radius)[0, 0].numpy()


def image_to_tensor(image: RasterImage, dtype=torch.float32) -> torch.Tensor:
    """``H x W x c`` image to a ``1 x c x H x W`` tensor."""
    return torch.as_tensor(image.data.transpose(2, 0, 1).copy(), dtype=dtype)[None]


def tensor_to_image(t: torch.Tensor) -> RasterImage:
    """``c x H x W`` (or ``1 x c x H x W``) raw prediction to a clamped image."""
    if t.ndim == 4:
        t = t[0]
    return RasterImage.clipped(t.detach().cpu().double().numpy().transpose(1, 2, 0))


# -- file I/O -----------------------------------------------------------------

_TIFF_SUFFIXES = {".tif", ".tiff"}


def _to_unit(array: np.ndarray) -> np.ndarray:
    if array.dtype == np.uint8:
        return array.astype(np.float64) / 255.0
    if array.dtype == np.uint16:
        return array.astype(np.float64) / 65535.0
    if np.issubdtype(array.dtype, np.floating):
        return array.astype(np.float64)
    raise ValueError(f"unsupported pixel type {array.dtype}")


def read_image(path: PathLike) -> RasterImage:
    """Read an 8/16-bit PNG or TIFF into [0, 1]. Alpha channels are dropped."""
    path = Path(path)
    if path.suffix.lower() in _TIFF_SUFFIXES:
        import tifffile

        array = tifffile.imread(path)
        if array.ndim == 3 and array.shape[0] in (3, 4) and array.shape[-1] not in (3, 4):
            array = np.moveaxis(array, 0, -1)
        if array.ndim == 3 and array.shape[2] == 4:
            array = array[:, :, :3]
    else:
        import cv2

        array = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if array is None:
            raise OSError(f"cannot read image {path}")
        if array.ndim == 3:
            array = array[:, :, 2::-1]  # BGR(A) -> RGB
    return RasterImage(np.ascontiguousarray(_to_unit(array)))


def write_image(path: PathLike, image: RasterImage, bit_depth: int = 8) -> Path:
    """Write an image as PNG or TIFF; values are scaled and rounded half away from zero."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    path = Path(path)
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    top = np.iinfo(dtype).max
    scaled = np.floor(image.data * top + 0.5).astype(dtype)
    if scaled.shape[2] == 1:
        scaled = scaled[:, :, 0]
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() in _TIFF_SUFFIXES:
        import tifffile

        tifffile.imwrite(path, scaled)
    else:
        import cv2

        out = scaled[:, :, ::-1] if scaled.ndim == 3 else scaled
        if not cv2.imwrite(str(path), np.ascontiguousarray(out)):
            raise OSError(f"cannot write image {path}")
    return path
