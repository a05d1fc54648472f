"""Set-level metric reports and paper-style result tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .distribution import distribution_metrics
from .segmentation import CONVENTIONS, mif_channel_masks, segmentation_metrics
from .stain import ihc_dab_mask
from .texture import texture_metrics

REPORT_SCHEMA = "vstain.report/1"
MODES = ("texture", "mif", "ihc", "all")
TABLE_COLUMNS = ("PSNR", "SSIM", "MSE", "FID", "Dice", "IoU", "HD")
_SEG_KEYS = ("dice", "iou", "hd", "tpr", "tnr")


@dataclass
class MetricReport:
    texture: Optional[dict] = None
    distribution: Optional[dict] = None
    segmentation: dict = field(default_factory=dict)
    n_images: int = 0
    mode: str = "all"
    model: str = ""
    provenance: dict = field(default_factory=dict)
    per_image: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "model": self.model,
            "mode": self.mode,
            "n_images": self.n_images,
            "texture": self.texture,
            "distribution": self.distribution,
            "segmentation": self.segmentation,
            "conventions": CONVENTIONS if self.segmentation else None,
            "provenance": self.provenance,
            "per_image": self.per_image,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(
            texture=d.get("texture"),
            distribution=d.get("distribution"),
            segmentation=d.get("segmentation") or {},
            n_images=d.get("n_images", 0),
            mode=d.get("mode", "all"),
            model=d.get("model", ""),
            provenance=d.get("provenance") or {},
            per_image=d.get("per_image") or [],
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def summary_row(self) -> dict:
        """Table row: texture and FID values, segmentation averaged over stains."""
        row = {c: None for c in TABLE_COLUMNS}
        if self.texture:
            row.update(PSNR=self.texture["psnr"], SSIM=self.texture["ssim"], MSE=self.texture["mse"])
        if self.distribution:
            row["FID"] = self.distribution["fid"]
        if self.segmentation:
            for col, key in (("Dice", "dice"), ("IoU", "iou"), ("HD", "hd")):
                row[col] = float(np.mean([m[key] for m in self.segmentation.values()]))
        return row


def _masks(image, mode: str) -> dict:
    out = {}
    if mode in ("mif", "all"):
        out.update(mif_channel_masks(image))
    if mode in ("ihc", "all"):
        out["dab"] = ihc_dab_mask(image)
    return out


def evaluate_sets(
    preds: Sequence,
    refs: Sequence,
    mode: str = "all",
    embedder: Optional[Callable] = None,
    names: Optional[Sequence[str]] = None,
    mask_sink: Optional[Callable[[str, str, np.ndarray, np.ndarray], None]] = None,
) -> MetricReport:
    """Per-image metrics averaged over the set, plus set-level FID.

    ``mask_sink(name, stain, pred_mask, ref_mask)`` is called for every
    segmentation mask pair when given (used to dump masks for auditing).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if len(preds) != len(refs) or not preds:
        raise ValueError("prediction and reference sets must be non-empty and of equal size")
    names = list(names) if names is not None else [str(i) for i in range(len(preds))]
    per_image = []
    for name, pred, ref in zip(names, preds, refs):
        entry: dict = {"name": name}
        if mode in ("texture", "all"):
            entry["texture"] = texture_metrics(pred, ref)
        pm, rm = _masks(pred, mode), _masks(ref, mode)
        if pm:
            entry["segmentation"] = {k: segmentation_metrics(pm[k], rm[k]) for k in pm}
            if mask_sink is not None:
                for k in pm:
                    mask_sink(name, k, pm[k], rm[k])
        per_image.append(entry)

    report = MetricReport(mode=mode, n_images=len(preds), per_image=per_image)
    if mode in ("texture", "all"):
        report.texture = {
            k: float(np.mean([e["texture"][k] for e in per_image])) for k in ("psnr", "ssim", "mse")
        }
        report.distribution = distribution_metrics(preds, refs, embedder)
    if "segmentation" in per_image[0]:
        report.segmentation = {
            stain: {k: float(np.mean([e["segmentation"][stain][k] for e in per_image])) for k in _SEG_KEYS}
            for stain in per_image[0]["segmentation"]
        }
    return report


def _fmt(value, col: str) -> str:
    if value is None:
        return "-"
    if col in ("SSIM", "Dice", "IoU"):
        return f"{value:.4f}"
    return f"{value:.2f}"


def render_table(reports: Sequence[MetricReport], fmt: str = "md", names: Optional[Sequence[str]] = None) -> str:
    """One row per model with columns PSNR, SSIM, MSE, FID, Dice, IoU, HD."""
    names = list(names) if names is not None else [r.model or f"model{i}" for i, r in enumerate(reports)]
    rows = [(n, r.summary_row()) for n, r in zip(names, reports)]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["Model", *TABLE_COLUMNS])
        for name, row in rows:
            writer.writerow([name, *("" if row[c] is None else repr(float(row[c])) for c in TABLE_COLUMNS)])
        return buf.getvalue()
    if fmt != "md":
        raise ValueError(f"unknown table format {fmt!r}")
    lines = [
        "| Model | " + " | ".join(TABLE_COLUMNS) + " |",
        "|---|" + "---:|" * len(TABLE_COLUMNS),
    ]
    for name, row in rows:
        lines.append(f"| {name} | " + " | ".join(_fmt(row[c], c) for c in TABLE_COLUMNS) + " |")
    return "\n".join(lines) + "\n"
