"""Boundary- and occupancy-aware segmentation of Gaussian surfel scenes."""

__version__ = "0.1.0"
