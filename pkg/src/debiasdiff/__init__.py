"""Desk-scale lab for invariant-guidance bias mitigation in conditional diffusion models."""

__version__ = "0.1.0"
