"""Spectral analysis of one-dimensional high-contrast periodic media with a defect."""

__version__ = "0.1.0"
