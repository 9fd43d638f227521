"""Gaussian primitives, projection and compositing."""
from .gaussians import Gaussian, GaussianSet, build_covariance, concat, load_gaussians, save_gaussians
from .project import Projected2D, gaussian_normal, project_gaussian
from .raster import BACKEND, FrameBuffers, backward, rasterize, render

__all__ = [
    "BACKEND",
    "FrameBuffers",
    "Gaussian",
    "GaussianSet",
    "Projected2D",
    "backward",
    "build_covariance",
    "concat",
    "gaussian_normal",
    "load_gaussians",
    "project_gaussian",
    "rasterize",
    "render",
    "save_gaussians",
]
