"""Geo-encoded transformer regression for plant species richness, with baselines,
block-based evaluation, MC dropout uncertainty and raster mapping."""

__version__ = "0.1.0"

from .geoenc import GeoEncoderConfig, encode, render_layer, distinctiveness
from .model import SpatioformerConfig, ModelParams, init, forward, forward_vit, forward_cnn, attention_decompose
from .numerics import RngStream, Tensor

__all__ = [
    "GeoEncoderConfig",
    "ModelParams",
    "RngStream",
    "SpatioformerConfig",
    "Tensor",
    "attention_decompose",
    "distinctiveness",
    "encode",
    "forward",
    "forward_cnn",
    "forward_vit",
    "init",
    "render_layer",
]
