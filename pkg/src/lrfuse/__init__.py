"""LiDAR-radar BEV fusion: joint voxel encoding, gated feature fusion and a toy detector."""

__version__ = "0.1.0"
