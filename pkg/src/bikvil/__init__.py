"""Bimanual keypoint-based imitation: constraint extraction and admittance reproduction."""

from .errors import BikvilError

__version__ = "0.1.0"
__all__ = ["BikvilError", "__version__"]
