"""Euler-alignment swarms in bounded domains: particles, hydrodynamics, construction and leaders."""

__version__ = "0.1.0"
