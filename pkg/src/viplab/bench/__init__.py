"""Synthetic detection benchmark."""
