"""Desk-scale cascaded diffusion models with conditioning augmentation."""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
