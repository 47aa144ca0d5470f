"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
implementation is loaded. Set ``ADVPLAN_PURE_PYTHON=1`` to force the
fallback.
"""
import os

if os.environ.get("ADVPLAN_PURE_PYTHON") == "1":
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        from . import _kernels_py as _impl

BACKEND = _impl.BACKEND
RESAMPLE_POINTS = _impl.RESAMPLE_POINTS

fk_markers = _impl.fk_markers
segment_point_distance = _impl.segment_point_distance
capsules_hit_spheres = _impl.capsules_hit_spheres
resample_markers = _impl.resample_markers
directions = _impl.directions
encode_markers = _impl.encode_markers
encode_paths = _impl.encode_paths
disc_forward = _impl.disc_forward
pack_discriminator = _impl.pack_discriminator
disc_forward_packed = _impl.disc_forward_packed

__all__ = [
    "BACKEND",
    "RESAMPLE_POINTS",
    "fk_markers",
    "segment_point_distance",
    "capsules_hit_spheres",
    "resample_markers",
    "directions",
    "encode_markers",
    "encode_paths",
    "disc_forward",
    "disc_forward_packed",
    "pack_discriminator",
]
