import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advplan.collision import (
    Scene,
    Sphere,
    densify,
    edge_in_collision,
    interpolate,
    markers_in_collision,
    motion_in_collision,
    state_in_collision,
)
from advplan.kernels import segment_point_distance
from advplan.kinematics import KinematicChain


def dense_distance(a, b, c, samples=20001):
    """Oracle: minimum distance from c to many points along the segment."""
    t = np.linspace(0.0, 1.0, samples)[:, None]
    return float(np.min(np.linalg.norm(a + t * (b - a) - c, axis=1)))


def frames(s, e, h):
    return np.array([[s, e, h]], dtype=np.float64)


def test_segment_through_center():
    scene = Scene((Sphere((0, 0, 1), 0.2),), link_radius=0.0)
    assert markers_in_collision(frames([0, 0, 0], [0, 0, 1.0], [0, 0, 2.0]), scene)[0]


def test_tangent_counts_as_contact():
    scene = Scene((Sphere((0.5, 0.2, 0), 0.15),), link_radius=0.05)
    assert markers_in_collision(frames([0, 0, 0], [1, 0, 0], [2, 0, 0]), scene)[0]
    scene = Scene((Sphere((0.5, 0.2 + 1e-9, 0), 0.15),), link_radius=0.05)
    assert not markers_in_collision(frames([0, 0, 0], [1, 0, 0], [2, 0, 0]), scene)[0]


def test_empty_scene_never_collides():
    arm = KinematicChain.default()
    assert not state_in_collision(arm, np.zeros(7), Scene())
    assert not motion_in_collision(arm, np.zeros((3, 7)), Scene())


def test_sphere_validation():
    with pytest.raises(ValueError):
        Sphere((0, 0, 0), 0.0)
    with pytest.raises(ValueError):
        Scene(link_radius=-0.1)


def test_scene_dict_round_trip():
    scene = Scene((Sphere((0.1, 0.2, 0.3), 0.1),), 0.02)
    assert Scene.from_dict(scene.to_dict()) == scene


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=9, max_size=9))
def test_segment_distance_matches_dense_oracle(xs):
    a, b, c = np.array(xs).reshape(3, 3)
    assert float(segment_point_distance(a, b, c)) == pytest.approx(dense_distance(a, b, c), abs=1e-4)


def test_interpolation_spacing_and_endpoints():
    a, b = np.zeros(7), np.full(7, 0.1)
    states = interpolate(a, b, 0.05)
    np.testing.assert_array_equal(states[0], a)
    np.testing.assert_array_equal(states[-1], b)
    assert np.all(np.linalg.norm(np.diff(states, axis=0), axis=1) <= 0.05 + 1e-12)
    motion = np.array([a, b, a])
    dense = densify(motion, 0.05)
    assert len(dense) == 2 * (len(states) - 1) + 1


def test_edge_collision_catches_midpoint_contact():
    arm = KinematicChain.default()
    # sweeping the upright arm about the Y axis passes through a sphere in between
    q_a = np.array([0, -0.8, 0, 0, 0, 0, 0.0])
    q_b = np.array([0, 0.8, 0, 0, 0, 0, 0.0])
    scene = Scene((Sphere((0, 0, 0.5), 0.05),))
    assert not state_in_collision(arm, q_a, scene)
    assert not state_in_collision(arm, q_b, scene)
    assert edge_in_collision(arm, q_a, q_b, scene)
    assert motion_in_collision(arm, np.array([q_a, q_b]), scene)


def test_motion_needs_two_states():
    with pytest.raises(ValueError):
        motion_in_collision(KinematicChain.default(), np.zeros((1, 7)), Scene())
