"""Dual-branch (spectral + learned) audio classifier with fixed, shared and sampling feature fusion."""

__version__ = "0.1.0"
