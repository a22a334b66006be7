"""bodysplat: animatable human avatars from 2D Gaussian surfels on a skinned body.

Pure-numpy core with optional numba-accelerated rasterization kernels
(select with BODYSPLAT_BACKEND=numba|numpy).
"""

__version__ = "0.1.0"
