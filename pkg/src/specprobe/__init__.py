"""Probe-driven checking and repair of natural-language specs for legacy programs."""

__version__ = "0.1.0"
