"""Variable-length semantic IDs from hyperbolic adaptive residual quantization."""

__version__ = "0.1.0"
