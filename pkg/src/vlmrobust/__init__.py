"""Adversarial image attacks on a miniature vision-language captioner."""

__version__ = "0.1.0"
