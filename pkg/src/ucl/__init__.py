"""Unified contrastive learning of image classification and image-text alignment, at toy scale."""

__version__ = "0.1.0"
