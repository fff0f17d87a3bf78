"""Reduced-order phasor simulator for a hybrid GFM/GFL converter system."""

__version__ = "0.1.0"
