"""Continuous vector-field representation of 3D molecules and field-to-molecule reconstruction."""

__version__ = "0.1.0"
