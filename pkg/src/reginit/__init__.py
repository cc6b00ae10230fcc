"""Regression-initialized 2D/3D rigid registration of volumes to radiographs."""

__version__ = "0.1.0"
