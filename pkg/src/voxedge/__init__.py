"""Edge-guided point cloud completion on voxel grids.

A numpy package with numba-accelerated kernels, a small reverse-mode autodiff
engine, a voxel completion network with an edge branch, synthetic shape data,
training and inference drivers, and a command line interface.
"""

__version__ = "0.1.0"
