"""Low-dose CT denoising with a projection-domain Poisson diffusion and an image-domain guided refinement."""

from .core import AttenuationImage, HUWindow, PrelogProjection, Rng
from .geometry import FanBeamGeometry, fbp, forward_project, preset
from .pipeline import need_reconstruct, neglog

__version__ = "0.1.0"

__all__ = [
    "AttenuationImage",
    "HUWindow",
    "PrelogProjection",
    "Rng",
    "FanBeamGeometry",
    "fbp",
    "forward_project",
    "preset",
    "need_reconstruct",
    "neglog",
]
