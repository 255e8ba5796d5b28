"""Granular multimodal attention for visual dialog, built on a small numpy autodiff core."""

__version__ = "0.1.0"
