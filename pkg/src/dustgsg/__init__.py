"""Gaussian scene graphs with per-source pose timelines for asynchronous two-camera capture."""

__version__ = "0.1.0"
