"""Causally-informed dynamics learning (CADY) with sampling-based MPC."""

__version__ = "0.1.0"
