"""Geometry-aware masked point-patch reconstruction for 3D anomaly detection."""

__version__ = "0.1.0"
