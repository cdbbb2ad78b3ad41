"""Tabular in-context learning with biaxial row attention."""

from .autodiff import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
