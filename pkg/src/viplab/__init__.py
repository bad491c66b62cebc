"""Desk-scale visual-prompted detection lab."""

__version__ = "0.1.0"
