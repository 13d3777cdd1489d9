"""Numerical laboratory for Allen-Cahn critical points, their spectra and limit interfaces."""

__version__ = "0.1.0"
