"""Dialogue breakdown detection with continued MLM pre-training and SSMBA augmentation."""

__version__ = "0.1.0"
