"""Dual-view LiDAR moving-object segmentation pipeline.

Range-view and bird's-eye-view projections, residual motion features, a
multi-branch fusion network forward pass with a selective-scan bottleneck,
segmentation losses and IoU evaluation, plus a synthetic-scene oracle and a
CLI tying it together.
"""

from .kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
