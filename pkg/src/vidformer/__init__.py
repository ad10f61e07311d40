"""Dual-branch (3D CNN + video transformer) remote-PPG model with a synthetic-video harness."""

__version__ = "0.1.0"
