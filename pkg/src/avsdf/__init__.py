"""Articulated volumetric signed distance model on a synthetic capsule body."""

__version__ = "0.1.0"
