"""Evidential radiance fields with verifiable uncertainty propagation."""

__version__ = "0.1.0"
