"""Multi-task matching network for thermal-infrared object tracking."""

__version__ = "0.1.0"
