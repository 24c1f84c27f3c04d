"""Automated defect classification and segmentation for line-space SEM images."""

__version__ = "0.1.0"
