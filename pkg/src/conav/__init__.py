"""Collaborative cross-modal navigation harness."""

__version__ = "0.1.0"
