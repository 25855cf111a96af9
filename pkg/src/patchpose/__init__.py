"""Template-based coarse 6D pose estimation from patch correspondences."""

__version__ = "0.1.0"
