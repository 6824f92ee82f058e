"""Multiclass tooth segmentation for panoramic dental X-rays, built on a small numpy autodiff."""

__version__ = "0.1.0"
