"""Spectral computation and verification of time-periodic breathers via a dual variational method."""

__version__ = "0.1.0"
