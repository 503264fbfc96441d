"""Text-conditioned object detection on synthetic 2D scenes."""

__version__ = "0.1.0"
