"""Dual-source flying-focal-spot helical CT: simulation, exact system model, CE reconstruction, metrics."""

__version__ = "0.1.0"
