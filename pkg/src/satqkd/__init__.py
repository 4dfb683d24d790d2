"""Finite-key performance model for satellite downlink decoy-state BB84."""

__version__ = "0.1.0"
