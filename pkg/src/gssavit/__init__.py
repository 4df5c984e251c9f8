"""Arbitrary-ratio downscaling and forecasting of gridded fields with
scale-conditioned transformers that emit splatted Gaussian primitives."""

from .grid import FieldTensor, LatLonGrid, bicubic_interp, bilinear_interp, build_grid, refined_grid
from .gaussians import GaussianSet
from .model import GSSAViT, ModelConfig, init_params
from .render import RenderConfig, render_grid, render_points
from .train import FieldDataset, TrainConfig, train
from .metrics import evaluate, lrmse, mean_bias, pearson

__version__ = "0.1.0"

__all__ = [
    "FieldTensor", "LatLonGrid", "bicubic_interp", "bilinear_interp", "build_grid", "refined_grid",
    "GaussianSet", "GSSAViT", "ModelConfig", "init_params", "RenderConfig", "render_grid", "render_points",
    "FieldDataset", "TrainConfig", "train", "evaluate", "lrmse", "mean_bias", "pearson",
]
