"""Tests package for the PolyMap simulator."""
