"""ECoG decoder learning curves on synthetic data."""

__version__ = "0.1.0"
