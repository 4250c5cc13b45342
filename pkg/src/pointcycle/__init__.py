"""Continuation of point-to-cycle connecting orbits in three-dimensional ODEs."""

__version__ = "0.1.0"
