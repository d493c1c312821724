"""Sparse-view, pose-free Gaussian-splatting reconstruction toolkit."""

from .errors import SparseSplatError
from .geometry import Camera, GaussianCloud, ImageBuffer
from .renderer import RenderGradients, RenderOutput, render_backward, render_forward

__all__ = [
    "Camera",
    "GaussianCloud",
    "ImageBuffer",
    "RenderGradients",
    "RenderOutput",
    "SparseSplatError",
    "render_backward",
    "render_forward",
]

__version__ = "0.1.0"
