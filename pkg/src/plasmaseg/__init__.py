"""Two-stage multi-scale instance segmentation of plasma cells."""

__version__ = "0.1.0"
