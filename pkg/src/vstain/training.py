"""Paired patches and the end-to-end optimization loop."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .implicit_head import ImplicitModel, ModelConfig
from .imagecore import RasterImage, make_grid
from .losses import PerceptualLoss, default_perceptual_specs

log = logging.getLogger(__name__)

__all__ = [
    "PairedPatch",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "batch_loss",
    "make_patches",
    "train_model",
    "write_history",
]

HISTORY_COLUMNS = ("step", "implicit_loss", "perceptual_loss", "total")


@dataclass(frozen=True, eq=False)
class PairedPatch:
    source: RasterImage
    target: RasterImage
    id: str = ""

    def __post_init__(self):
        if self.source.shape[:2] != self.target.shape[:2]:
            raise ValueError(
                f"pair {self.id!r} is not pixel-aligned: {self.source.shape[:2]} vs {self.target.shape[:2]}"
            )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 200
    max_steps: Optional[int] = None
    radius: int = 1
    coord_sampling: str = "full_grid"
    sample_fraction: float = 1.0
    seed: int = 0
    checkpoint_every: Optional[int] = None
    lambdas: list[float] = field(default_factory=lambda: [1.0, 1.0, 0.0])
    perceptual_networks: list[str] = field(
        default_factory=lambda: ["alexnet-style", "vgg-style", "resnet50-style"]
    )
    dtype: str = "float32"
    lr_schedule: str = "constant"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.coord_sampling not in ("full_grid", "random_fraction"):
            raise ValueError(f"coord_sampling must be 'full_grid' or 'random_fraction', got {self.coord_sampling!r}")
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, batch_ids: Sequence[str], value: float):
        self.step = step
        self.batch_ids = list(batch_ids)
        super().__init__(f"non-finite loss {value} at step {step} on batch {self.batch_ids}")


@dataclass
class TrainResult:
    model: ImplicitModel
    history: list[dict]
    config: TrainConfig


def make_patches(image_pair, patch: int, stride: int, prefix: str = "patch") -> list[PairedPatch]:
    """Crop identical windows from both images in raster order; remainders are dropped."""
    source, target = image_pair
    if source.shape[:2] != target.shape[:2]:
        raise ValueError("image pair is not pixel-aligned")
    if patch < 1 or stride < 1:
        raise ValueError("patch and stride must be positive")
    h, w = source.shape[:2]
    if patch > min(h, w):
        warnings.warn(f"patch size {patch} exceeds image size {h}x{w}; no patches produced", stacklevel=2)
        return []
    out = []
    for y in range(0, h - patch + 1, stride):
        for x in range(0, w - patch + 1, stride):
            out.append(
                PairedPatch(
                    RasterImage(source.data[y : y + patch, x : x + patch]),
                    RasterImage(target.data[y : y + patch, x : x + patch]),
                    id=f"{prefix}_{y}_{x}",
                )
            )
    return out


def _stack(images: Sequence[RasterImage], dtype) -> torch.Tensor:
    return torch.as_tensor(np.stack([im.data.transpose(2, 0, 1) for im in images]), dtype=dtype)


def write_history(path, history: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_COLUMNS})
    return path


def batch_loss(
    model: ImplicitModel,
    x: torch.Tensor,
    y: torch.Tensor,
    cfg: TrainConfig,
    perceptual: Optional[PerceptualLoss] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """``(implicit, perceptual)`` loss terms for one batch under ``cfg.coord_sampling``."""
    h, w = x.shape[-2:]
    feats = model.encode(x)
    if cfg.coord_sampling == "full_grid":
        pred = model.render(feats, h, w)
        implicit = (pred - y).abs().mean()
        perc = perceptual(pred, y) if perceptual is not None else implicit.new_zeros(())
        return implicit, perc
    rng = rng if rng is not None else np.random.default_rng()
    n_coords = h * w
    n_sample = max(1, math.ceil(cfg.sample_fraction * n_coords))
    picks = torch.as_tensor(np.stack([rng.choice(n_coords, size=n_sample, replace=False) for _ in range(x.shape[0])]))
    grid = torch.as_tensor(make_grid(h, w).flat(), dtype=x.dtype)
    pred = model.query(feats, grid[picks])
    truth = y.flatten(2).transpose(1, 2)
    truth = torch.gather(truth, 1, picks[..., None].expand(-1, -1, truth.shape[-1]))
    implicit = (pred - truth).abs().mean()
    return implicit, implicit.new_zeros(())


def train_model(
    dataset: Sequence[PairedPatch],
    cfg: TrainConfig,
    model_cfg: Optional[ModelConfig] = None,
    out_dir=None,
    callback: Optional[Callable[[int, dict, ImplicitModel], None]] = None,
) -> TrainResult:
    """Jointly fit encoders, positional embedding and head with Adam.

    Each step encodes the batch sources once, evaluates the head on the
    sampled coordinates and minimizes the mean absolute error plus the
    weighted perceptual terms. With ``random_fraction`` sampling only a
    subset of pixels is scored and the perceptual term (which needs whole
    rasters) is skipped.
    """
    if not dataset:
        raise ValueError("training needs at least one paired patch")
    shapes = {p.source.shape for p in dataset}
    tshapes = {p.target.shape for p in dataset}
    if len(shapes) != 1 or len(tshapes) != 1:
        raise ValueError("all patches must share one source shape and one target shape")
    h, w, c_in = next(iter(shapes))
    c_out = next(iter(tshapes))[2]
    if model_cfg is None:
        model_cfg = ModelConfig(in_channels=c_in, out_channels=c_out, radius=cfg.radius)
    if model_cfg.in_channels != c_in or model_cfg.out_channels != c_out:
        raise ValueError(
            f"model maps {model_cfg.in_channels}->{model_cfg.out_channels} channels but data is {c_in}->{c_out}"
        )
    model_cfg = replace(model_cfg, radius=cfg.radius)
    dtype = getattr(torch, cfg.dtype)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = ImplicitModel(model_cfg).to(dtype)
    model.train()
    specs = default_perceptual_specs(cfg.lambdas, cfg.perceptual_networks)
    perceptual = PerceptualLoss(specs).to(dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    sources = _stack([p.source for p in dataset], dtype)
    targets = _stack([p.target for p in dataset], dtype)
    ids = [p.id for p in dataset]
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * steps_per_epoch
    metadata = {
        "train": cfg.to_dict(),
        "optimizer": {"name": "adam", "betas": [0.9, 0.999], "eps": 1e-8, "lr": cfg.learning_rate, "schedule": cfg.lr_schedule},
        "perceptual": [s.to_dict() for s in specs],
    }

    scheduler = None
    if cfg.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(total_steps, 1))

    history: list[dict] = []
    step = 0
    order = np.empty(0, dtype=np.int64)
    while step < total_steps:
        if order.size == 0:
            order = rng.permutation(n)
        batch, order = order[: cfg.batch_size], order[cfg.batch_size :]
        implicit, perc = batch_loss(model, sources[batch], targets[batch], cfg, perceptual, rng)
        total = implicit + perc
        value = float(total.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(step, [ids[i] for i in batch], value)
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        if scheduler is not None:
            scheduler.step()
        record = {
            "step": step,
            "implicit_loss": float(implicit.detach()),
            "perceptual_loss": float(perc.detach()),
            "total": value,
        }
        history.append(record)
        if callback is not None:
            callback(step, record, model)
        step += 1
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / f"checkpoint_step{step:06d}.zip", model, {**metadata, "step": step})
        if step % 100 == 0:
            log.info("step %d total %.5f", step, value)

    model.eval()
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "checkpoint.zip", model, {**metadata, "step": step})
        write_history(out_dir / "loss_history.csv", history)
    return TrainResult(model=model, history=history, config=cfg)
