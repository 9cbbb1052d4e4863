"""Temporal residual Jacobians for rig-free mesh motion transfer."""

__version__ = "0.1.0"
