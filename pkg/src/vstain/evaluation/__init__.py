"""Texture, distribution and staining-accuracy metrics."""

from .distribution import StatsEmbedder, distribution_metrics, frechet_distance, identity_embedder
from .report import MODES, MetricReport, evaluate_sets, render_table
from .segmentation import (
    OtsuResult,
    clean_mask,
    hausdorff,
    mif_channel_masks,
    otsu_mask,
    otsu_threshold,
    segmentation_metrics,
)
from .stain import STAIN_MATRIX, color_deconvolution, concentrations_to_rgb, ihc_dab_mask
from .texture import mse, psnr, ssim, texture_metrics

__all__ = [
    "MODES",
    "MetricReport",
    "OtsuResult",
    "STAIN_MATRIX",
    "StatsEmbedder",
    "clean_mask",
    "color_deconvolution",
    "concentrations_to_rgb",
    "distribution_metrics",
    "evaluate_sets",
    "frechet_distance",
    "hausdorff",
    "identity_embedder",
    "ihc_dab_mask",
    "mif_channel_masks",
    "mse",
    "otsu_mask",
    "otsu_threshold",
    "psnr",
    "render_table",
    "segmentation_metrics",
    "ssim",
    "texture_metrics",
]
