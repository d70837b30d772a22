"""Poverty prediction from per-class object detection counts in overhead imagery."""

__version__ = "0.1.0"
