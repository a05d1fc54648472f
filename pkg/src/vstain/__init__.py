"""Coordinate-conditioned, pixel-level paired image translation for virtual staining."""

__version__ = "0.1.0"

from .encoders import AttnEncoderConfig, ConvEncoderConfig, encode_attn, encode_conv, fuse
from .implicit_head import ImplicitModel, ModelConfig, embed_coord, predict_grid, predict_pixel
from .imagecore import (
    CoordinateGrid,
    FeatureMap,
    RasterImage,
    extract_window,
    make_grid,
    nearest_pixel,
    read_image,
    write_image,
)
from .inference import translate
from .training import PairedPatch, TrainConfig, make_patches, train_model

__all__ = [
    "AttnEncoderConfig",
    "ConvEncoderConfig",
    "CoordinateGrid",
    "FeatureMap",
    "ImplicitModel",
    "ModelConfig",
    "PairedPatch",
    "RasterImage",
    "TrainConfig",
    "embed_coord",
    "encode_attn",
    "encode_conv",
    "extract_window",
    "fuse",
    "make_grid",
    "make_patches",
    "nearest_pixel",
    "predict_grid",
    "predict_pixel",
    "read_image",
    "train_model",
    "translate",
    "write_image",
]
