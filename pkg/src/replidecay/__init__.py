"""Simulation and analysis of replicated file storage under server failures."""

__version__ = "0.1.0"
