"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``.
Results agree to rounding (not bitwise); within one backend they are
deterministic and independent of batch composition.
"""
import numpy as np

RESAMPLE_POINTS = 30
_TINY_ARC = 1e-9
_HAND = -1

BACKEND = "python"


def _rotations(axis, angles):
    # Rodrigues, batched over angles.
    kx, ky, kz = axis
    K = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    K2 = K @ K
    s = np.sin(angles)[:, None, None]
    c = np.cos(angles)[:, None, None]
    return np.eye(3) + s * K + (1.0 - c) * K2


def fk_frames(axes, links, Q):
    """World positions and rotations of every frame, shape (B, d+1, 3) and (B, d+1, 3, 3)."""
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    B, d = Q.shape
    pos = np.zeros((B, d + 1, 3))
    rot = np.empty((B, d + 1, 3, 3))
    R = np.broadcast_to(np.eye(3), (B, 3, 3)).copy()
    p = np.zeros((B, 3))
    rot[:, 0] = R
    for i in range(d):
        R = R @ _rotations(axes[i], Q[:, i])
        p = p + R @ links[i]
        pos[:, i + 1] = p
        rot[:, i + 1] = R
    return pos, rot


def fk_markers(axes, links, markers, Q):
    pos, _ = fk_frames(axes, links, Q)
    return pos[:, list(markers), :]


def segment_point_distance(a, b, c):
    """Distance from points ``c`` to segments ``a``-``b`` (broadcasting over leading axes)."""
    ab = b - a
    denom = np.einsum("...i,...i->...", ab, ab)
    num = np.einsum("...i,...i->...", c - a, ab)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(denom > 0.0, num / np.where(denom > 0.0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.sqrt(np.einsum("...i,...i->...", closest - c, closest - c))


def capsules_hit_spheres(P, centers, radii, link_radius):
    """Per state: does either arm segment (as a capsule) touch any sphere?

    ``P`` holds marker positions (B, 3, 3) ordered shoulder, elbow, hand.
    """
    P = np.asarray(P, dtype=np.float64)
    B = P.shape[0]
    hit = np.zeros(B, dtype=bool)
    if len(radii) == 0 or B == 0:
        return hit
    for c, r in zip(centers, radii):
        lim = r + link_radius
        for s in range(P.shape[1] - 1):
            d = segment_point_distance(P[:, s], P[:, s + 1], c)
            hit |= d <= lim
    return hit


def resample_markers(M, count=RESAMPLE_POINTS):
    """Resample a marker polyline uniformly in cumulative hand arc length.

    ``M`` has shape (n, k, 3); the last marker is the hand. Falls back to
    index-uniform spacing when the hand path is shorter than 1e-9.
    """
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    if n < 2:
        raise ValueError("need at least two frames to resample a motion")
    hand = M[:, _HAND]
    seg = np.sqrt(((hand[1:] - hand[:-1]) ** 2).sum(axis=1))
    cum = np.concatenate(([0.0], np.cumsum(seg)))
    total = cum[-1]
    k = np.arange(count)
    if total < _TINY_ARC:
        u = k * (n - 1) / (count - 1)
        idx = np.minimum(np.floor(u).astype(np.intp), n - 2)
        t = u - idx
    else:
        s = k * total / (count - 1)
        idx = np.minimum(np.searchsorted(cum[1:], s, side="left"), n - 2)
        length = seg[idx]
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(length > 0.0, (s - cum[idx]) / np.where(length > 0.0, length, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)[:, None, None]
    out = M[idx] + t * (M[idx + 1] - M[idx])
    out[0] = M[0]
    out[-1] = M[-1]
    return out


def directions(R):
    """(count, 3, 3) marker frames -> (count, 6) unit segment directions."""
    d1 = R[:, 1] - R[:, 0]
    d2 = R[:, 2] - R[:, 1]
    n1 = np.sqrt((d1 * d1).sum(axis=1))
    n2 = np.sqrt((d2 * d2).sum(axis=1))
    if np.any(n1 == 0.0) or np.any(n2 == 0.0):
        raise ValueError("zero-length arm segment: cannot form a direction")
    return np.concatenate((d1 / n1[:, None], d2 / n2[:, None]), axis=1)


def encode_markers(M):
    return directions(resample_markers(M))


def encode_paths(markers_all, parent, node_ids, extra=None):
    """Encode the root-to-node path of each node, optionally extended by one extra frame.

    ``parent[root] == -1``. ``extra`` is (B, 3, 3) or None.
    """
    out = np.empty((len(node_ids), RESAMPLE_POINTS, 6))
    for b, node in enumerate(node_ids):
        path = []
        i = int(node)
        while i >= 0:
            path.append(i)
            i = int(parent[i])
        path.reverse()
        M = markers_all[path]
        if extra is not None:
            M = np.concatenate((M, extra[b][None]), axis=0)
        out[b] = encode_markers(M)
    return out


def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def disc_forward(X, weights, biases, strides, dense_w, dense_b):
    """Batch-invariant forward pass; each sample reduces in a fixed order."""
    A = np.asarray(X, dtype=np.float64)
    for W, b, s in zip(weights, biases, strides):
        c_out, c_in, k = W.shape
        L_in = A.shape[1]
        L_out = (L_in - k) // s + 1
        idx = (np.arange(L_out) * s)[:, None] + np.arange(k)[None, :]
        patches = A[:, idx, :].transpose(0, 1, 3, 2).reshape(A.shape[0], L_out, c_in * k)
        Wm = W.reshape(c_out, c_in * k)
        Z = (patches[:, :, None, :] * Wm[None, None, :, :]).sum(axis=-1) + b
        A = np.maximum(Z, 0.0)
    F = A.transpose(0, 2, 1).reshape(A.shape[0], -1)
    z = (F * dense_w[0][None, :]).sum(axis=-1) + dense_b[0]
    return np.clip(_stable_sigmoid(z), _SIG_LO, _SIG_HI)


def pack_discriminator(weights, biases, strides, dense_w, dense_b):
    return (tuple(weights), tuple(biases), tuple(int(v) for v in strides), dense_w, dense_b)


def disc_forward_packed(X, packed):
    return disc_forward(X, *packed)
