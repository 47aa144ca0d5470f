"""Serial revolute chains: forward kinematics, swivel-parameterised IK and goal sampling.

A chain is a list of revolute joints, each followed by a fixed link
translation. Frame 0 is the base; frame ``i + 1`` is obtained from frame
``i`` by rotating about joint ``i``'s axis and then translating by link
``i``. Three frames are reported as the shoulder, elbow and hand markers.
"""
from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels
from ._kernels_py import fk_frames

SWIVEL_REFERENCE = np.array([0.0, 0.0, -1.0])
SWIVEL_FALLBACK = np.array([1.0, 0.0, 0.0])


class IKFailure(Exception):
    """Raised when no joint state reaches the requested hand position and swivel."""

    def __init__(self, reason, message=None):
        super().__init__(message or reason)
        self.reason = reason


class KinematicChain:
    """Immutable description of a serial revolute chain with three markers."""

    def __init__(self, axes, links, limits, markers, names=None):
        axes = np.array(axes, dtype=np.float64)
        links = np.array(links, dtype=np.float64)
        limits = np.array(limits, dtype=np.float64)
        markers = tuple(int(m) for m in markers)
        if axes.ndim != 2 or axes.shape[1] != 3:
            raise ValueError("axes must be a (dof, 3) array")
        dof = axes.shape[0]
        if dof < 2:
            raise ValueError("a chain needs at least two joints")
        if links.shape != (dof, 3):
            raise ValueError(f"expected {dof} link translations, got shape {links.shape}")
        if limits.shape != (dof, 2):
            raise ValueError(f"expected {dof} [lo, hi] limit pairs, got shape {limits.shape}")
        norms = np.linalg.norm(axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("every joint axis must have unit norm")
        if np.any(limits[:, 0] >= limits[:, 1]):
            raise ValueError("joint limits must satisfy lo < hi")
        if np.any(np.abs(limits) > 2.0 * math.pi):
            raise ValueError("joint limits must lie within [-2pi, 2pi]")
        if len(markers) != 3:
            raise ValueError("exactly three markers (shoulder, elbow, hand) are required")
        if markers[0] != 0:
            raise ValueError("the shoulder marker must be the chain base (frame 0)")
        if not (markers[0] < markers[1] < markers[2] <= dof):
            raise ValueError("marker indices must be strictly increasing frame indices")
        for arr in (axes, links, limits):
            arr.setflags(write=False)
        self.axes = axes
        self.links = links
        self.limits = limits
        self.lower = limits[:, 0]
        self.upper = limits[:, 1]
        self.markers = markers
        self.names = tuple(names) if names else tuple(f"q{i + 1}" for i in range(dof))
        zero = forward_kinematics(self, np.zeros(dof))
        self.segment_lengths = (
            float(np.linalg.norm(zero[1] - zero[0])),
            float(np.linalg.norm(zero[2] - zero[1])),
        )

    @property
    def dof(self):
        return self.axes.shape[0]

    @property
    def reach(self):
        """Radius of the workspace bounding sphere around the shoulder."""
        return float(np.linalg.norm(self.links, axis=1).sum())

    @classmethod
    def from_dict(cls, doc):
        joints = doc["joints"]
        return cls(
            axes=[j["axis"] for j in joints],
            links=doc["links"],
            limits=[j["limits"] for j in joints],
            markers=doc["markers"],
            names=[j.get("name", f"q{i + 1}") for i, j in enumerate(joints)],
        )

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls, limit=None):
        """The 7-DOF anthropomorphic arm (upper arm 0.30 m, forearm 0.25 m)."""
        text = resources.files("advplan").joinpath("data/default_chain.json").read_text("utf-8")
        doc = json.loads(text)
        if limit is not None:
            for j in doc["joints"]:
                j["limits"] = [-limit, limit]
        return cls.from_dict(doc)

    def to_dict(self):
        return {
            "joints": [
                {"name": n, "axis": a.tolist(), "limits": lim.tolist()}
                for n, a, lim in zip(self.names, self.axes, self.limits)
            ],
            "links": self.links.tolist(),
            "markers": list(self.markers),
        }

    def check_state(self, q):
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dof,):
            raise ValueError(f"joint state has shape {q.shape}, chain has {self.dof} joints")
        return q

    def within_limits(self, q, tol=0.0):
        q = self.check_state(q)
        return bool(np.all(q >= self.lower - tol) and np.all(q <= self.upper + tol))

    def __eq__(self, other):
        if not isinstance(other, KinematicChain):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))

    def __repr__(self):
        return f"KinematicChain(dof={self.dof}, segments={self.segment_lengths})"


def load_chain(path=None):
    if path is None or str(path) == "default":
        return KinematicChain.default()
    return KinematicChain.from_json(Path(path))


def forward_kinematics(chain, q):
    """Shoulder, elbow and hand positions as a (3, 3) array (rows are markers)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (chain.dof,):
        raise ValueError(f"joint state has shape {q.shape}, chain has {chain.dof} joints")
    return kernels.fk_markers(chain.axes, chain.links, chain.markers, q[None, :])[0]


def forward_kinematics_batch(chain, Q):
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] != chain.dof:
        raise ValueError(f"expected (n, {chain.dof}) joint states, got {Q.shape}")
    return kernels.fk_markers(chain.axes, chain.links, chain.markers, Q)


def _wrap(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _cross(a, b):
    return np.array((a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]))


def _swivel_frame(u):
    r = SWIVEL_REFERENCE - np.dot(SWIVEL_REFERENCE, u) * u
    n = np.linalg.norm(r)
    if n < 1e-6:
        r = SWIVEL_FALLBACK - np.dot(SWIVEL_FALLBACK, u) * u
        n = np.linalg.norm(r)
    r = r / n
    return r, _cross(u, r)


def swivel_angle(shoulder, elbow, hand):
    """Rotation of the elbow about the shoulder-hand axis.

    Zero when the elbow lies in the plane spanned by the axis and world -Z
    (on the -Z side); world +X replaces -Z when the axis is vertical.
    Positive rotation follows the right-hand rule about shoulder->hand.
    """
    axis = np.asarray(hand, dtype=np.float64) - shoulder
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("hand coincides with shoulder: swivel undefined")
    u = axis / n
    r, w = _swivel_frame(u)
    e = np.asarray(elbow, dtype=np.float64) - shoulder
    return math.atan2(float(np.dot(e, w)), float(np.dot(e, r)))


def state_swivel(chain, q):
    s, e, h = forward_kinematics(chain, q)
    return swivel_angle(s, e, h)


def _task_jacobian(chain, q):
    pos, rot = fk_frames(chain.axes, chain.links, q[None, :])
    pos, rot = pos[0], rot[0]
    _, ie, ih = chain.markers
    world_axes = np.einsum("fij,fj->fi", rot[:-1], chain.axes)
    s, e, h = pos[0], pos[ie], pos[ih]
    J_e = np.zeros((3, chain.dof))
    J_h = np.zeros((3, chain.dof))
    for i in range(chain.dof):
        if i < ie:
            J_e[:, i] = _cross(world_axes[i], e - pos[i])
        if i < ih:
            J_h[:, i] = _cross(world_axes[i], h - pos[i])
    psi = swivel_angle(s, e, h)
    # d(swivel)/d(elbow, hand) by central differences on the marker coordinates
    eps = 1e-7
    g_e = np.zeros(3)
    g_h = np.zeros(3)
    for k in range(3):
        d = np.zeros(3)
        d[k] = eps
        g_e[k] = _wrap(swivel_angle(s, e + d, h) - swivel_angle(s, e - d, h)) / (2 * eps)
        g_h[k] = _wrap(swivel_angle(s, e, h + d) - swivel_angle(s, e, h - d)) / (2 * eps)
    J = np.vstack((J_h, (g_e @ J_e + g_h @ J_h)[None, :]))
    return h, psi, J


def inverse_kinematics(chain, target, swivel, seed_state, *, damping=1e-2, max_iter=200,
                       step_clamp=0.2, tol_pos=1e-7, tol_swivel=1e-7):
    """Damped least squares on the stacked (hand position, swivel) task.

    Returns a joint state within limits whose hand lies within ``tol_pos``
    of ``target`` and whose swivel matches within ``tol_swivel``. Raises
    :class:`IKFailure` with reason ``"unreachable"`` or ``"no-convergence"``.
    """
    target = np.asarray(target, dtype=np.float64)
    q = np.clip(chain.check_state(seed_state).copy(), chain.lower, chain.upper)
    shoulder = forward_kinematics(chain, q)[0]
    dist = float(np.linalg.norm(target - shoulder))
    l1, l2 = chain.segment_lengths
    if dist > chain.reach or dist > l1 + l2 or dist < abs(l1 - l2) or dist == 0.0:
        raise IKFailure("unreachable", f"target at {dist:.4f} m is outside the workspace")
    lam2 = damping * damping
    for _ in range(max_iter):
        h, psi, J = _task_jacobian(chain, q)
        err = np.empty(4)
        err[:3] = target - h
        err[3] = _wrap(swivel - psi)
        if np.linalg.norm(err[:3]) <= tol_pos and abs(err[3]) <= tol_swivel:
            return q
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(4), err)
        big = np.max(np.abs(dq))
        if big > step_clamp:
            dq *= step_clamp / big
        q = np.clip(q + dq, chain.lower, chain.upper)
    h, psi, _ = _task_jacobian(chain, q)
    if np.linalg.norm(target - h) <= tol_pos and abs(_wrap(swivel - psi)) <= tol_swivel:
        return q
    raise IKFailure("no-convergence", f"no solution after {max_iter} iterations")


def _is_anthropomorphic(chain):
    ex, ey, ez = np.eye(3)
    if chain.dof < 4 or chain.markers[1] != 3:
        return False
    axes_ok = all(np.allclose(a, b) for a, b in zip(chain.axes[:4], (ez, ey, ex, ey)))
    links = chain.links
    return bool(
        axes_ok
        and np.allclose(links[:2], 0.0)
        and np.allclose(links[2][:2], 0.0) and links[2][2] > 0
        and np.allclose(links[3][:2], 0.0) and links[3][2] > 0
        and np.allclose(links[4:], 0.0)
    )


def _zyx_angles(R):
    q1 = -math.asin(max(-1.0, min(1.0, R[2, 0])))
    q0 = math.atan2(R[1, 0], R[0, 0])
    q2 = math.atan2(R[2, 1], R[2, 2])
    alt = (_wrap(q0 + math.pi), _wrap(math.pi - q1), _wrap(q2 + math.pi))
    return (q0, q1, q2), alt


def analytic_seeds(chain, target, swivel):
    """Closed-form joint states for the anthropomorphic layout (shoulder ZYX, elbow Y).

    Returns the candidates that respect joint limits; empty for other layouts.
    """
    if not _is_anthropomorphic(chain):
        return []
    l1, l2 = chain.links[2][2], chain.links[3][2]
    h = np.asarray(target, dtype=np.float64)
    d = float(np.linalg.norm(h))
    if d == 0.0 or d > l1 + l2 or d < abs(l1 - l2):
        return []
    u = h / d
    r, w = _swivel_frame(u)
    ca = max(-1.0, min(1.0, (l1 * l1 + d * d - l2 * l2) / (2 * l1 * d)))
    sa = math.sqrt(1.0 - ca * ca)
    e = l1 * (ca * u + sa * (math.cos(swivel) * r + math.sin(swivel) * w))
    c3 = max(-1.0, min(1.0, (d * d - l1 * l1 - l2 * l2) / (2 * l1 * l2)))
    out = []
    for q3 in (math.acos(c3), -math.acos(c3)):
        a_loc = np.array([0.0, 0.0, 1.0])
        b_loc = np.array([math.sin(q3), 0.0, math.cos(q3)])
        a_w = e / l1
        b_w = (h - e) / l2
        n_loc = _cross(a_loc, b_loc)
        n_w = _cross(a_w, b_w)
        if np.linalg.norm(n_loc) < 1e-9 or np.linalg.norm(n_w) < 1e-9:
            continue
        n_loc /= np.linalg.norm(n_loc)
        n_w /= np.linalg.norm(n_w)
        T_loc = np.column_stack((a_loc, n_loc, _cross(a_loc, n_loc)))
        T_w = np.column_stack((a_w, n_w, _cross(a_w, n_w)))
        R = T_w @ T_loc.T
        for q012 in _zyx_angles(R):
            q = np.zeros(chain.dof)
            q[:3] = q012
            q[3] = q3
            if np.all(q >= chain.lower) and np.all(q <= chain.upper):
                out.append(q)
    return out


def default_seeds(chain):
    """Deterministic bent-elbow seeds tried in order by :func:`sample_goal_states`."""
    base = np.zeros(chain.dof)
    seeds = []
    for elbow, lift in ((1.2, 0.6), (-1.2, -0.6), (1.8, 1.2), (-1.8, -1.2)):
        q = base.copy()
        q[1] = lift
        q[3] = elbow
        seeds.append(np.clip(q, chain.lower, chain.upper))
    return seeds


def sample_goal_states(chain, target, k, rng_seed, seeds=None):
    """Joint states reaching ``target`` at ``k`` swivels drawn uniformly from [0, 2pi).

    Only IK successes are returned, so the list may be shorter than ``k``
    (or empty for an unreachable target).
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    rng = np.random.default_rng(rng_seed)
    swivels = rng.uniform(0.0, 2.0 * math.pi, size=k)
    closed_form = seeds is None and _is_anthropomorphic(chain)
    fixed = [] if closed_form else (default_seeds(chain) if seeds is None else list(seeds))
    out = []
    for psi in swivels:
        # the closed form enumerates every branch, so an empty list means no solution
        candidates = analytic_seeds(chain, target, float(psi)) if closed_form else []
        for seed in candidates + fixed:
            try:
                q = inverse_kinematics(chain, target, float(psi), seed)
            except IKFailure as exc:
                if exc.reason == "unreachable":
                    return []
                continue
            out.append(q)
            break
    return out
