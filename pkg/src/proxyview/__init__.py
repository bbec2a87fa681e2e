"""Geometry-guided multi-view generation: normal integration, proxy meshes,
geometry-image rendering, geometry-enhanced attention and a toy sampler."""

__version__ = "0.1.0"
