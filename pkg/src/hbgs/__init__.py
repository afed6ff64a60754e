"""Hybrid bundle-adjusting 3D Gaussians on a CPU budget.

Anchor features from a voxelized point cloud are fused with per-pixel
image features, decoded into neural Gaussians, splatted, and optimized
jointly with the camera poses.
"""

__version__ = "0.1.0"
