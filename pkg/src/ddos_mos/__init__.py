"""Dual-head MOS prediction with judge conditioning, trained from scratch on numpy."""

__version__ = "0.1.0"
