"""Kinematic recalibration and fault detection for a 7-DoF arm."""

__version__ = "0.1.0"
