"""Question-conditioned frame compression with a fixed-capacity context memory."""

__version__ = "0.1.0"
