"""Mixture-of-experts implicit neural representations on a small numpy autodiff core."""

__version__ = "0.1.0"
