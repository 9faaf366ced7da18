"""Self-supervised occupancy and 3D flow fields over voxel grids."""

__version__ = "0.1.0"
