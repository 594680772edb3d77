"""Discrete-time geometric optimal control on manifolds."""

__version__ = "0.1.0"
