"""Monocular edge visual odometry with edge-guided data association."""

__version__ = "0.1.0"
