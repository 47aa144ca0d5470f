"""Sphere obstacles and capsule checks for the two arm segments."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .kinematics import forward_kinematics_batch

DEFAULT_LINK_RADIUS = 0.03
DEFAULT_RESOLUTION = 0.05


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        if len(c) != 3:
            raise ValueError("sphere center must be a 3-vector")
        object.__setattr__(self, "center", c)
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class Scene:
    spheres: tuple = ()
    link_radius: float = DEFAULT_LINK_RADIUS
    _centers: np.ndarray = field(init=False, repr=False, compare=False)
    _radii: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "spheres", tuple(self.spheres))
        if self.link_radius < 0:
            raise ValueError("link_radius must be non-negative")
        centers = np.array([s.center for s in self.spheres], dtype=np.float64).reshape(-1, 3)
        radii = np.array([s.radius for s in self.spheres], dtype=np.float64)
        object.__setattr__(self, "_centers", centers)
        object.__setattr__(self, "_radii", radii)

    @property
    def empty(self):
        return not self.spheres

    @classmethod
    def from_dict(cls, doc):
        if doc is None:
            return cls()
        spheres = [Sphere(tuple(s["center"]), float(s["radius"])) for s in doc.get("spheres", [])]
        return cls(tuple(spheres), float(doc.get("link_radius", DEFAULT_LINK_RADIUS)))

    def to_dict(self):
        return {
            "spheres": [{"center": list(s.center), "radius": s.radius} for s in self.spheres],
            "link_radius": self.link_radius,
        }

    def without_spheres(self):
        return Scene((), self.link_radius)


def markers_in_collision(markers, scene):
    """Vectorised verdicts for marker frames of shape (B, 3, 3)."""
    markers = np.asarray(markers, dtype=np.float64)
    if scene.empty:
        return np.zeros(markers.shape[0], dtype=bool)
    return kernels.capsules_hit_spheres(markers, scene._centers, scene._radii, scene.link_radius)


def state_in_collision(chain, q, scene):
    if scene.empty:
        return False
    P = forward_kinematics_batch(chain, np.asarray(q, dtype=np.float64)[None, :])
    return bool(markers_in_collision(P, scene)[0])


def interpolate(q_a, q_b, resolution):
    """States from ``q_a`` to ``q_b`` (inclusive) with joint-space spacing <= resolution."""
    dist = float(np.linalg.norm(q_b - q_a))
    steps = max(1, math.ceil(dist / resolution))
    t = np.arange(steps + 1, dtype=np.float64) / steps
    return q_a[None, :] + t[:, None] * (q_b - q_a)[None, :]


def densify(motion, resolution):
    motion = np.asarray(motion, dtype=np.float64)
    parts = [interpolate(motion[i], motion[i + 1], resolution)[:-1] for i in range(len(motion) - 1)]
    parts.append(motion[-1:])
    return np.concatenate(parts, axis=0)


def edge_in_collision(chain, q_a, q_b, scene, resolution=DEFAULT_RESOLUTION):
    if scene.empty:
        return False
    states = interpolate(np.asarray(q_a, dtype=np.float64), np.asarray(q_b, dtype=np.float64), resolution)
    return bool(markers_in_collision(forward_kinematics_batch(chain, states), scene).any())


def motion_in_collision(chain, motion, scene, resolution=DEFAULT_RESOLUTION):
    """True if any waypoint or interpolated state along the motion touches a sphere."""
    motion = np.asarray(motion, dtype=np.float64)
    if motion.ndim != 2 or len(motion) < 2:
        raise ValueError("a motion needs at least two states")
    if scene.empty:
        return False
    states = densify(motion, resolution)
    return bool(markers_in_collision(forward_kinematics_batch(chain, states), scene).any())
