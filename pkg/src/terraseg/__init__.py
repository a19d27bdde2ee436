"""Fortified-surface segmentation from LiDAR point clouds and orthophotos.

Submodules are imported on demand so that ``terraseg.cli`` can configure
thread limits before numpy loads.
"""

__version__ = "0.1.0"
