"""Self-calibrating HDR radiance fields on a sparse voxel grid."""

__version__ = "0.1.0"
