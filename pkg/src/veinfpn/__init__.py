"""Finger-vein enhancement (ResFPN) and recognition toolkit."""

__version__ = "0.1.0"
