"""Convolutional Relational Machine: activity maps for group activity recognition."""

__version__ = "0.1.0"
