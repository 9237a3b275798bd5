"""Multi-source semi-supervised 3D segmentation on synthetic phantom volumes."""

__version__ = "0.1.0"
