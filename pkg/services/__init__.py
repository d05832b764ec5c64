"""
Service layer for the PolyMap stair-climbing simulator.

This package contains framework-agnostic logic (perception, estimation,
foothold selection, planning, simulation) used by the CLI and the tests.
"""

__version__ = "1.0.0"
