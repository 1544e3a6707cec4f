"""Composite-face reconstruction attack simulator with FDS filtering defense."""

__version__ = "0.1.0"
