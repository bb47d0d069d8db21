"""Masked-reconstruction detection of backdoor inputs to self-supervised encoders."""

__version__ = "0.1.0"
