"""Desk-scale domain-randomized manipulation training harness."""

__version__ = "0.1.0"
