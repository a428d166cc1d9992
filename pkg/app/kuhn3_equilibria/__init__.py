"""Equilibrium branches of three-player N-card Kuhn poker."""

__version__ = "0.1.0"
