"""Spiking-network parameter identification for a DC-DC buck converter."""

__version__ = "0.1.0"
