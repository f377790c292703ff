"""Memory Encoding Model: voxel-wise brain response prediction at desk scale."""

__version__ = "0.1.0"
