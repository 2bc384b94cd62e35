"""Hybrid min/max pooling downsampling (HPD) and a small numpy segmentation testbed."""

__version__ = "0.1.0"
