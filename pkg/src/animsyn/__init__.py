"""Desk-scale controllable human-video diffusion with a synthetic-data curation harness."""
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
