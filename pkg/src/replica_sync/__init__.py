"""Replica-coupled diffusion: simulation, linear response and speciation analysis."""

__version__ = "0.1.0"
