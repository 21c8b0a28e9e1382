"""Anchor-free detection with center, corner and aggregation attention, built on a small numpy autodiff core."""

__version__ = "0.1.0"
