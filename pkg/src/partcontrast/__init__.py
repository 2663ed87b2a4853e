"""Unsupervised point-cloud feature learning by part contrasting and clustering."""

__version__ = "0.1.0"
