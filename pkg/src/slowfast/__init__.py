"""Phase- and layer-dependent fine-tuning schedules on a from-scratch numpy transformer."""

__version__ = "0.1.0"
