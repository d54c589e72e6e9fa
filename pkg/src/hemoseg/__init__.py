"""Cascaded 3D hemorrhage segmentation and volumetry on synthetic CT phantoms."""

__version__ = "0.1.0"
