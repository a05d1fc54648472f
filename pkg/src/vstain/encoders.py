"""Full-resolution feature extractors.

Two backbones run side by side on the source image: a stack of stride-1
3x3 convolutions for local texture, and a shifted-window self-attention
stack whose token grid is the pixel grid (patch size 1, no merging) for
longer-range context. Neither ever changes the spatial size, so feature
``[:, i, j]`` always describes source pixel ``(i, j)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imagecore import FeatureMap, RasterImage, image_to_tensor

__all__ = [
    "ConvEncoderConfig",
    "AttnEncoderConfig",
    "ConvEncoder",
    "AttnEncoder",
    "DualEncoder",
    "encode_conv",
    "encode_attn",
    "fuse",
]


@dataclass
class ConvEncoderConfig:
    in_channels: int = 3
    num_layers: int = 12
    base_channels: int = 32
    output_channels: int = 64

    def channel_schedule(self) -> list[int]:
        """Output width of every layer: 32, 32, 64, 64, ... capped, last = C_out."""
        if self.num_layers < 1:
            raise ValueError("conv encoder needs at least one layer")
        cap = max(self.base_channels, self.output_channels)
        widths = [min(self.base_channels * 2 ** (i // 2), cap) for i in range(self.num_layers - 1)]
        return widths + [self.output_channels]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttnEncoderConfig:
    in_channels: int = 3
    num_heads: int = 8
    depth: int = 6
    embed_dim: int = 256
    window_size: int = 8
    output_channels: int = 64
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        if self.window_size < 1:
            raise ValueError("window_size must be positive")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class ConvEncoder(nn.Module):
    def __init__(self, cfg: ConvEncoderConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        c_in = cfg.in_channels
        widths = cfg.channel_schedule()
        for i, c_out in enumerate(widths):
            layers.append(nn.Conv2d(c_in, c_out, kernel_size=3, stride=1, padding=1))
            if i < len(widths) - 1:
                layers.append(nn.ReLU())
            c_in = c_out
        self.layers = nn.Sequential(*layers)

    @property
    def out_channels(self) -> int:
        return self.cfg.output_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        return self.layers(x)


def _window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    b, h, wd, c = x.shape
    x = x.view(b, h // w, w, wd // w, w, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, w * w, c)


def _window_reverse(windows: torch.Tensor, w: int, h: int, wd: int) -> torch.Tensor:
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // w) * (wd // w))
    x = windows.view(b, h // w, wd // w, w, w, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, wd, c)


def _shift_mask(h: int, wd: int, w: int, shift: int, device) -> torch.Tensor:
    """Additive mask that stops rolled-around pixels from attending across the seam."""
    region = torch.zeros(1, h, wd, 1, device=device)
    cuts = (slice(0, -w), slice(-w, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            region[:, hs, ws, :] = label
            label += 1
    ids = _window_partition(region, w).squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


class WindowAttention(nn.Module):
    """Multi-head self-attention inside ``w x w`` windows with relative position bias."""

    def __init__(self, dim: int, window_size: int, num_heads: int):
        super().__init__()
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        span = 2 * window_size - 1
        self.relative_position_bias = nn.Parameter(torch.zeros(span * span, num_heads))
        nn.init.trunc_normal_(self.relative_position_bias, std=0.02)
        coords = torch.stack(
            torch.meshgrid(torch.arange(window_size), torch.arange(window_size), indexing="ij")
        ).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window_size - 1)
        self.register_buffer("relative_index", rel[..., 0] * span + rel[..., 1], persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias[self.relative_index.reshape(-1)]
        attn = attn + bias.reshape(n, n, -1).permute(2, 0, 1)[None]
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, window_size: int, shift: int, mlp_ratio: float):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, wd, c = x.shape
        w = self.window_size
        # a window that already covers the whole map gains nothing from shifting
        shift = self.shift if min(h, wd) > w else 0
        y = self.norm1(x)
        mask = None
        if shift:
            y = torch.roll(y, shifts=(-shift, -shift), dims=(1, 2))
            mask = _shift_mask(h, wd, w, shift, x.device).to(x.dtype)
        y = self.attn(_window_partition(y, w), mask)
        y = _window_reverse(y, w, h, wd)
        if shift:
            y = torch.roll(y, shifts=(shift, shift), dims=(1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


class AttnEncoder(nn.Module):
    def __init__(self, cfg: AttnEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.in_channels, cfg.embed_dim)
        self.blocks = nn.ModuleList(
            SwinBlock(
                cfg.embed_dim,
                cfg.num_heads,
                cfg.window_size,
                shift=0 if i % 2 == 0 else cfg.window_size // 2,
                mlp_ratio=cfg.mlp_ratio,
            )
            for i in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.out_proj = nn.Linear(cfg.embed_dim, cfg.output_channels)

    @property
    def out_channels(self) -> int:
        return self.cfg.output_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        h, wd = x.shape[-2:]
        w = self.cfg.window_size
        pad_h, pad_w = (-h) % w, (-wd) % w
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        t = self.in_proj(x.permute(0, 2, 3, 1))
        for block in self.blocks:
            t = block(t)
        t = self.out_proj(self.norm(t))
        return t.permute(0, 3, 1, 2)[:, :, :h, :wd]


class DualEncoder(nn.Module):
    """Runs the enabled backbones and concatenates their features, conv block first."""

    def __init__(self, conv: Optional[ConvEncoderConfig], attn: Optional[AttnEncoderConfig]):
        super().__init__()
        if conv is None and attn is None:
            raise ValueError("at least one backbone must be enabled")
        if conv is not None and attn is not None:
            if conv.output_channels != attn.output_channels:
                raise ValueError("both backbones must emit the same channel count C")
            if conv.in_channels != attn.in_channels:
                raise ValueError("backbones disagree on the input channel count")
        self.conv = ConvEncoder(conv) if conv is not None else None
        self.attn = AttnEncoder(attn) if attn is not None else None

    @property
    def in_channels(self) -> int:
        return (self.conv or self.attn).cfg.in_channels

    @property
    def out_channels(self) -> int:
        return sum(m.out_channels for m in (self.conv, self.attn) if m is not None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [m(x) for m in (self.conv, self.attn) if m is not None]
        return feats[0] if len(feats) == 1 else torch.cat(feats, dim=1)


def _run(image: RasterImage, module: nn.Module) -> FeatureMap:
    dtype = next(module.parameters()).dtype
    with torch.no_grad():
        out = module(image_to_tensor(image, dtype=dtype))
    return FeatureMap(out[0].numpy())


def encode_conv(image: RasterImage, encoder: ConvEncoder) -> FeatureMap:
    """``C_out x H x W`` local features of ``image``."""
    return _run(image, encoder)


def encode_attn(image: RasterImage, encoder: AttnEncoder) -> FeatureMap:
    """``C_out x H x W`` windowed-attention features of ``image``."""
    return _run(image, encoder)


def fuse(conv_features: FeatureMap, attn_features: FeatureMap) -> FeatureMap:
    """Channel concatenation of the two maps, conv features first."""
    a, b = conv_features.data, attn_features.data
    if a.shape != b.shape:
        raise ValueError(f"cannot fuse feature maps of shapes {a.shape} and {b.shape}")
    return FeatureMap(np.concatenate([a, b], axis=0))
