"""Continual activity recognition with a self-supervised cross-attention transformer and a distilled CNN."""

__version__ = "0.1.0"
