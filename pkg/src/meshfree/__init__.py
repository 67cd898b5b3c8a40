"""Meshless SPH discretizations of -div(M grad u) with finite-volume references."""

__version__ = "0.1.0"
