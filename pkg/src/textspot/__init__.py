"""Panoptic symbol spotting for vector CAD drawings with text annotations as graph nodes."""

__version__ = "0.1.0"
