"""Exchangeable sequence models: Student-t/Gaussian processes on top of a coupling-layer flow."""

__version__ = "0.1.0"
