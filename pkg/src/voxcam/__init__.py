"""Automatic ROI detection for volumetric classification with 3D CNNs and Grad-CAM."""

__version__ = "0.1.0"
