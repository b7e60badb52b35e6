"""Octree-sampled Gaussian splats with a learned, render-driven density."""

__version__ = "0.1.0"
