"""Two-phase semi-supervised multi-organ segmentation with balanced subclass regularization."""

__version__ = "0.1.0"
