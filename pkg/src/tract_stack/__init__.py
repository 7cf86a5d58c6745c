"""Tract Stack - direct white matter bundle segmentation with stacked U-Nets."""

__version__ = "0.1.0"
