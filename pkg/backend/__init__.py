"""Backend module for the PolyMap stair-climbing simulator."""

__version__ = "1.0.0"
