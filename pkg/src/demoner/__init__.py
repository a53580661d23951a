"""Demonstration-based learning for low-resource named entity recognition."""

from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
