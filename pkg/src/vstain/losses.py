"""Training objective: mean absolute pixel error plus weighted perceptual terms.

Perceptual terms compare activations of frozen feature networks at fixed tap
points. Three compact network styles are provided (``alexnet-style``,
``vgg-style``, ``resnet50-style``) plus ``identity``, whose only tap is the
image itself. Network weights come from, in order: an explicit file in the
spec, ``$VSTAIN_WEIGHTS_DIR/<name>.pt``, or a seeded frozen random
initialization, so nothing has to be downloaded.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "WEIGHTS_ENV",
    "NETWORK_STYLES",
    "PerceptualConfigError",
    "PerceptualNetworkSpec",
    "PerceptualLoss",
    "default_perceptual_specs",
    "implicit_loss",
    "perceptual_loss",
    "total_loss",
]

WEIGHTS_ENV = "VSTAIN_WEIGHTS_DIR"
NETWORK_STYLES = ("identity", "alexnet-style", "vgg-style", "resnet50-style")
_MIN_SIDE = 16
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class PerceptualConfigError(ValueError):
    pass


@dataclass
class PerceptualNetworkSpec:
    name: str
    weight: float = 1.0
    layers: Optional[list[str]] = None
    weights_path: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.name not in NETWORK_STYLES:
            raise PerceptualConfigError(f"unknown perceptual network {self.name!r}; expected one of {NETWORK_STYLES}")
        if not self.weight >= 0:
            raise PerceptualConfigError(f"perceptual weight must be non-negative, got {self.weight}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "weight": self.weight,
            "layers": self.layers,
            "weights_path": self.weights_path,
            "seed": self.seed,
        }


def default_perceptual_specs(
    lambdas: Sequence[float] = (1.0, 1.0, 0.0),
    networks: Sequence[str] = ("alexnet-style", "vgg-style", "resnet50-style"),
) -> list[PerceptualNetworkSpec]:
    """One spec per ``(network, lambda)`` pair; the default weighting is (1, 1, 0)."""
    if len(lambdas) != len(networks):
        raise PerceptualConfigError(f"{len(lambdas)} lambdas given for {len(networks)} networks")
    return [PerceptualNetworkSpec(name=n, weight=float(w)) for n, w in zip(networks, lambdas)]


# -- feature networks ---------------------------------------------------------


class _Identity(nn.Module):
    taps = ("pixels",)

    def forward(self, x):
        return {"pixels": x}


class _AlexNetStyle(nn.Module):
    """Large strided first kernel, then narrower convolutions."""

    taps = ("relu1", "relu2", "relu3")

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 32, 7, stride=2, padding=3)
        self.conv2 = nn.Conv2d(32, 64, 5, padding=2)
        self.conv3 = nn.Conv2d(64, 64, 3, padding=1)

    def forward(self, x):
        out = {}
        x = out["relu1"] = F.relu(self.conv1(x))
        x = out["relu2"] = F.relu(self.conv2(x))
        x = F.max_pool2d(x, 2)
        out["relu3"] = F.relu(self.conv3(x))
        return out


class _VGGStyle(nn.Module):
    """Pairs of 3x3 convolutions separated by 2x2 max pooling."""

    taps = ("relu1_2", "relu2_2")

    def __init__(self):
        super().__init__()
        self.conv1_1 = nn.Conv2d(3, 32, 3, padding=1)
        self.conv1_2 = nn.Conv2d(32, 32, 3, padding=1)
        self.conv2_1 = nn.Conv2d(32, 64, 3, padding=1)
        self.conv2_2 = nn.Conv2d(64, 64, 3, padding=1)

    def forward(self, x):
        out = {}
        x = F.relu(self.conv1_1(x))
        x = out["relu1_2"] = F.relu(self.conv1_2(x))
        x = F.max_pool2d(x, 2)
        x = F.relu(self.conv2_1(x))
        out["relu2_2"] = F.relu(self.conv2_2(x))
        return out


class _Bottleneck(nn.Module):
    def __init__(self, c_in, c_mid, c_out, stride):
        super().__init__()
        self.reduce = nn.Conv2d(c_in, c_mid, 1)
        self.conv = nn.Conv2d(c_mid, c_mid, 3, stride=stride, padding=1)
        self.expand = nn.Conv2d(c_mid, c_out, 1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=stride)

    def forward(self, x):
        y = self.expand(F.relu(self.conv(F.relu(self.reduce(x)))))
        return F.relu(y + self.skip(x))


class _ResNetStyle(nn.Module):
    """Stem plus two residual bottleneck stages."""

    taps = ("layer1", "layer2")

    def __init__(self):
        super().__init__()
        self.stem = nn.Conv2d(3, 32, 3, padding=1)
        self.layer1 = _Bottleneck(32, 16, 64, stride=1)
        self.layer2 = _Bottleneck(64, 32, 128, stride=2)

    def forward(self, x):
        out = {}
        x = F.relu(self.stem(x))
        x = out["layer1"] = self.layer1(x)
        out["layer2"] = self.layer2(x)
        return out


_ARCHS = {
    "identity": _Identity,
    "alexnet-style": _AlexNetStyle,
    "vgg-style": _VGGStyle,
    "resnet50-style": _ResNetStyle,
}


def _seeded_init(net: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                m.bias.zero_()


def _load_network(spec: PerceptualNetworkSpec) -> nn.Module:
    net = _ARCHS[spec.name]()
    if spec.name != "identity":
        path = spec.weights_path
        if path is None and os.environ.get(WEIGHTS_ENV):
            candidate = Path(os.environ[WEIGHTS_ENV]) / f"{spec.name}.pt"
            path = str(candidate) if candidate.exists() else None
        if path is not None:
            if not Path(path).exists():
                raise PerceptualConfigError(f"weights for perceptual network {spec.name!r} not found at {path}")
            state = torch.load(path, map_location="cpu", weights_only=True)
            try:
                net.load_state_dict(state)
            except RuntimeError as exc:
                raise PerceptualConfigError(f"weights at {path} do not fit {spec.name!r}: {exc}") from None
        else:
            _seeded_init(net, spec.seed)
    layers = spec.layers or list(net.taps)
    unknown = set(layers) - set(net.taps)
    if unknown:
        raise PerceptualConfigError(f"{spec.name!r} has no tap points {sorted(unknown)}")
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


class PerceptualLoss(nn.Module):
    """Sum over networks of ``lambda_k * mean_taps(MSE of features)``."""

    def __init__(self, specs: Sequence[PerceptualNetworkSpec]):
        super().__init__()
        active = [s for s in specs if s.weight > 0]
        self.specs = list(active)
        self.nets = nn.ModuleList(_load_network(s) for s in active)
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def train(self, mode: bool = True):
        # feature networks stay frozen in eval mode
        return super().train(False)

    def _prepare(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        h, w = x.shape[-2:]
        if min(h, w) < _MIN_SIDE:
            scale = _MIN_SIDE / min(h, w)
            size = (max(_MIN_SIDE, round(h * scale)), max(_MIN_SIDE, round(w * scale)))
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

    def forward(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        total = pred.new_zeros(())
        if not self.specs:
            return total
        for spec, net in zip(self.specs, self.nets):
            net.to(pred.dtype)
            layers = spec.layers or list(net.taps)
            if spec.name == "identity":
                fp, ft = {"pixels": pred}, {"pixels": target}
            else:
                fp, ft = net(self._prepare(pred)), net(self._prepare(target))
            per_tap = [F.mse_loss(fp[k], ft[k]) for k in layers]
            total = total + spec.weight * torch.stack(per_tap).mean()
        return total


# -- loss functions -----------------------------------------------------------


def _as_tensor(x) -> torch.Tensor:
    """Accept tensors (``B x c x H x W`` or ``c x H x W``), arrays or images (``H x W x c``)."""
    if isinstance(x, torch.Tensor):
        return x if x.ndim == 4 else x[None]
    data = getattr(x, "data", x)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def implicit_loss(pred, target) -> torch.Tensor:
    """Mean absolute difference over all pixels and channels."""
    p, t = _as_tensor(pred), _as_tensor(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    return (p - t.to(p.dtype)).abs().mean()


_NET_CACHE: dict = {}


def _cached(specs: Sequence[PerceptualNetworkSpec]) -> PerceptualLoss:
    key = tuple((s.name, s.weight, tuple(s.layers or ()), s.weights_path, s.seed) for s in specs)
    if key not in _NET_CACHE:
        _NET_CACHE[key] = PerceptualLoss(specs)
    return _NET_CACHE[key]


def perceptual_loss(pred, target, specs: Sequence[PerceptualNetworkSpec]) -> torch.Tensor:
    """Weighted perceptual distance; an empty spec list gives 0."""
    p, t = _as_tensor(pred), _as_tensor(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    return _cached(specs)(p, t.to(p.dtype))


def total_loss(pred, target, specs: Optional[Sequence[PerceptualNetworkSpec]] = None) -> torch.Tensor:
    if specs is None:
        specs = default_perceptual_specs()
    return implicit_loss(pred, target) + perceptual_loss(pred, target, specs)
