"""Bone age regression from whole-body scans with hierarchical CNN features."""

from .kernels import ACTIVE_LANE

__version__ = "0.1.0"
__all__ = ["ACTIVE_LANE", "__version__"]
