"""Network space search: distributions over per-stage depth/width windows under a FLOPs target."""

__version__ = "0.1.0"
