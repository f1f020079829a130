"""Policy-based few-step flow generation on low-dimensional toy densities."""

__version__ = "0.1.0"
