"""Porous-medium city simulator: traffic, emissions, wind and pollutant transport on P1 meshes."""

__version__ = "0.1.0"
