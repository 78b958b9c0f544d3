"""Simulation, value estimation and grid solving for controlled switch PDMPs."""

__version__ = "0.1.0"
