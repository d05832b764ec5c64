"""Command line entry points for the PolyMap tools."""
