"""Gait primitive certification and primitive-tree MPC planning."""

__version__ = "0.1.0"
