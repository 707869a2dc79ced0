"""Mask- and prompt-conditioned single-step defect synthesis for labeled data augmentation."""

__version__ = "0.1.0"
