"""1-bit network training with calibrate-and-distill for long-tailed data."""

__version__ = "0.1.0"
