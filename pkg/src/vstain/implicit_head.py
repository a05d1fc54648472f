"""Coordinate-conditioned implicit translation head.

For every query coordinate the head looks up the nearest source pixel,
flattens the ``(2r+1)^2`` window of fused features around it, appends a
learned linear embedding of the coordinate, and maps the result to a target
pixel with a ReLU MLP. Because queries are coordinates rather than pixel
indices, the same model renders any output grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .encoders import AttnEncoderConfig, ConvEncoderConfig, DualEncoder
from .imagecore import (
    CoordinateGrid,
    RasterImage,
    gather_windows,
    image_to_tensor,
    make_grid,
    nearest_indices,
    tensor_to_image,
)

__all__ = [
    "ModelConfig",
    "PositionalEmbedding",
    "ImplicitMLP",
    "ImplicitModel",
    "embed_coord",
    "predict_pixel",
    "predict_grid",
]


@dataclass
class ModelConfig:
    in_channels: int = 3
    out_channels: int = 3
    conv: Optional[ConvEncoderConfig] = field(default_factory=ConvEncoderConfig)
    attn: Optional[AttnEncoderConfig] = field(default_factory=AttnEncoderConfig)
    radius: int = 1
    pos_dim: int = 32
    hidden: list[int] = field(default_factory=lambda: [256, 256, 256, 256])

    def __post_init__(self):
        if isinstance(self.conv, dict):
            self.conv = ConvEncoderConfig(**self.conv)
        if isinstance(self.attn, dict):
            self.attn = AttnEncoderConfig(**self.attn)
        for sub in (self.conv, self.attn):
            if sub is not None and sub.in_channels != self.in_channels:
                raise ValueError(
                    f"encoder expects {sub.in_channels} input channels but the model takes {self.in_channels}"
                )
        if self.radius < 0:
            raise ValueError("radius must be non-negative")

    @property
    def feature_channels(self) -> int:
        return sum(s.output_channels for s in (self.conv, self.attn) if s is not None)

    @property
    def window_dim(self) -> int:
        """``d = C_total (2r+1)^2``; equals ``2C(2r+1)^2`` with both backbones enabled."""
        return self.feature_channels * (2 * self.radius + 1) ** 2

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "conv": None if self.conv is None else self.conv.to_dict(),
            "attn": None if self.attn is None else self.attn.to_dict(),
            "radius": self.radius,
            "pos_dim": self.pos_dim,
            "hidden": list(self.hidden),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class PositionalEmbedding(nn.Module):
    """Learnable linear map from ``(x, y)`` to a ``p``-vector."""

    def __init__(self, output_dim: int = 32):
        super().__init__()
        self.linear = nn.Linear(2, output_dim)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        return self.linear(coords)


class ImplicitMLP(nn.Module):
    def __init__(self, input_dim: int, hidden: Sequence[int], output_dim: int):
        super().__init__()
        layers: list[nn.Module] = []
        last = input_dim
        for width in hidden:
            layers += [nn.Linear(last, width), nn.ReLU()]
            last = width
        layers.append(nn.Linear(last, output_dim))
        self.layers = nn.Sequential(*layers)
        self.input_dim = input_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"MLP expects inputs of length {self.input_dim}, got {x.shape[-1]}")
        return self.layers(x)


class ImplicitModel(nn.Module):
    """Encoder pair, positional embedding and MLP head as one trainable unit."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = DualEncoder(cfg.conv, cfg.attn)
        self.pos = PositionalEmbedding(cfg.pos_dim)
        self.mlp = ImplicitMLP(cfg.window_dim + cfg.pos_dim, cfg.hidden, cfg.out_channels)

    @property
    def dtype(self) -> torch.dtype:
        return self.pos.linear.weight.dtype

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def head(self, windows: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        return self.mlp(torch.cat([windows, self.pos(coords)], dim=-1))

    def query(self, features: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        """Predict ``B x N x c`` raw values at ``B x N x 2`` coordinates."""
        h, w = features.shape[-2:]
        rows, cols = nearest_indices(coords, h, w)
        windows = gather_windows(features, rows, cols, self.cfg.radius)
        return self.head(windows, coords)

    def forward(self, images: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        return self.query(self.encode(images), coords)

    def render(self, features: torch.Tensor, height: int, width: int, chunk: Optional[int] = None) -> torch.Tensor:
        """Evaluate the head on a full ``height x width`` grid; returns ``B x c x H' x W'``."""
        b = features.shape[0]
        coords = torch.as_tensor(make_grid(height, width).flat(), dtype=features.dtype)
        coords = coords[None].expand(b, -1, -1)
        n = coords.shape[1]
        step = n if not chunk else chunk
        parts = [self.query(features, coords[:, i : i + step]) for i in range(0, n, step)]
        out = torch.cat(parts, dim=1)
        return out.transpose(1, 2).reshape(b, -1, height, width)


def embed_coord(coord, embedding: PositionalEmbedding) -> np.ndarray:
    t = torch.as_tensor(np.asarray(coord, dtype=np.float64), dtype=embedding.linear.weight.dtype)
    if not torch.all(torch.isfinite(t)):
        raise ValueError("coordinate must be finite")
    with torch.no_grad():
        return embedding(t).numpy()


def predict_pixel(coord, window_features, model: ImplicitModel) -> np.ndarray:
    """Raw (unclamped) head output for one coordinate and its window vector."""
    feats = torch.as_tensor(np.array(window_features), dtype=model.dtype)
    if feats.shape != (model.cfg.window_dim,):
        raise ValueError(f"window vector must have length {model.cfg.window_dim}, got {tuple(feats.shape)}")
    xy = torch.as_tensor(np.array(coord, dtype=np.float64), dtype=model.dtype)
    with torch.no_grad():
        return model.head(feats[None], xy[None])[0].numpy()


def predict_grid(
    image: RasterImage,
    grid: CoordinateGrid,
    model: ImplicitModel,
    batch_size: Optional[int] = 65536,
) -> RasterImage:
    """Translate ``image`` onto ``grid``; the encoders run once, the head once per coordinate."""
    with torch.no_grad():
        feats = model.encode(image_to_tensor(image, dtype=model.dtype))
        coords = torch.as_tensor(grid.flat(), dtype=model.dtype)[None]
        n = coords.shape[1]
        step = batch_size or n
        out = torch.cat([model.query(feats, coords[:, i : i + step]) for i in range(0, n, step)], dim=1)
    return tensor_to_image(out[0].T.reshape(-1, grid.height, grid.width))
