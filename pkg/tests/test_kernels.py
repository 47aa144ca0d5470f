"""The compiled kernels must agree with the numpy reference implementation."""
import numpy as np
import pytest

from advplan import _kernels_py as ref
from advplan import kernels
from advplan.kinematics import KinematicChain
from advplan.neuralnet import Discriminator

compiled = pytest.importorskip("advplan._kernels")


@pytest.fixture
def chain():
    return KinematicChain.default()


def _random_markers(rng, n):
    M = np.zeros((n, 3, 3))
    M[:, 1] = rng.normal(size=(n, 3))
    M[:, 2] = M[:, 1] + rng.normal(size=(n, 3))
    return M


def test_selected_backend_is_compiled():
    assert kernels.BACKEND == "cython"


def test_fk_markers_agree(chain):
    Q = np.random.default_rng(0).uniform(chain.lower, chain.upper, size=(200, chain.dof))
    a = compiled.fk_markers(chain.axes, chain.links, chain.markers, Q)
    b = ref.fk_markers(chain.axes, chain.links, chain.markers, Q)
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_capsule_verdicts_agree():
    rng = np.random.default_rng(1)
    P = _random_markers(rng, 500) * 0.3
    centers = rng.uniform(-0.4, 0.4, size=(3, 3))
    radii = np.array([0.05, 0.1, 0.15])
    np.testing.assert_array_equal(compiled.capsules_hit_spheres(P, centers, radii, 0.03),
                                  ref.capsules_hit_spheres(P, centers, radii, 0.03))


def test_segment_distance_agrees():
    rng = np.random.default_rng(2)
    a, b, c = rng.normal(size=(3, 3))
    assert compiled.segment_point_distance(a, b, c) == pytest.approx(float(ref.segment_point_distance(a, b, c)),
                                                                     abs=1e-15)


@pytest.mark.parametrize("n", [2, 3, 17, 50])
def test_encoding_agrees(n):
    M = _random_markers(np.random.default_rng(n), n)
    np.testing.assert_allclose(compiled.resample_markers(M), ref.resample_markers(M), atol=1e-13)
    np.testing.assert_allclose(compiled.encode_markers(M), ref.encode_markers(M), atol=1e-12)


def test_constant_motion_resamples_by_index():
    M = np.repeat(_random_markers(np.random.default_rng(3), 1), 4, axis=0)
    np.testing.assert_array_equal(compiled.resample_markers(M), ref.resample_markers(M))


def test_encode_paths_agree():
    rng = np.random.default_rng(4)
    markers = _random_markers(rng, 40)
    parent = np.array([-1] + [int(rng.integers(0, i)) for i in range(1, 40)])
    ids = np.array([0, 5, 17, 39])
    extra = _random_markers(rng, 4)
    np.testing.assert_allclose(compiled.encode_paths(markers, parent, ids, extra),
                               ref.encode_paths(markers, parent, ids, extra), atol=1e-12)
    np.testing.assert_allclose(compiled.encode_paths(markers, parent, ids[1:]),
                               ref.encode_paths(markers, parent, ids[1:]), atol=1e-12)
    for impl in (compiled, ref):
        with pytest.raises(ValueError):
            impl.encode_paths(markers, parent, ids[:1])


def test_zero_length_segment_rejected():
    M = np.zeros((3, 3, 3))
    M[:, 2] = [[0, 0, 1], [0, 0, 2], [0, 0, 3]]
    for impl in (compiled, ref):
        with pytest.raises(ValueError):
            impl.encode_markers(M)


def test_forward_pass_agrees_and_is_batch_invariant():
    d = Discriminator.initialize(5)
    X = np.random.default_rng(5).normal(size=(64, 30, 6))
    args = (d.params[0:6:2], d.params[1:6:2], d.arch.strides, d.params[6], d.params[7])
    a = compiled.disc_forward(X, *args)
    b = ref.disc_forward(X, *args)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)
    for impl, batch in ((compiled, a), (ref, b)):
        single = np.array([impl.disc_forward(X[i:i + 1], *args)[0] for i in range(len(X))])
        np.testing.assert_array_equal(single, batch)
    packed = compiled.pack_discriminator(*args)
    np.testing.assert_array_equal(compiled.disc_forward_packed(X, packed), a)
