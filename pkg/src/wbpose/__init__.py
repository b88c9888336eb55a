"""Differentiable whole-body 3D pose and mesh estimation at desk scale."""

from . import autodiff, errors

__all__ = ["autodiff", "errors"]
__version__ = "0.1.0"
