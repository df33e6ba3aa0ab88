"""Desk-scale contrast-augmented diffusion for markup-to-image rendering."""

__version__ = "0.1.0"
