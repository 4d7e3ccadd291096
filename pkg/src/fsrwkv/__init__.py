"""Frequency-aware linear-attention image translation, built on numpy."""

__version__ = "0.1.0"
