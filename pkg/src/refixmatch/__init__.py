"""Semi-supervised image classification with hard and soft pseudo-label targets."""

__version__ = "0.1.0"
