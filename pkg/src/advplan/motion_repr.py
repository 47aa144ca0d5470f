"""Motion encoding and demonstration preprocessing.

A motion is encoded as 30 rows of two unit vectors (shoulder->elbow,
elbow->hand) after resampling the marker polyline uniformly in hand arc
length. Only directions survive, so arm segment lengths and timing do not
leak into the encoding.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .kinematics import forward_kinematics_batch

REPR_ROWS = kernels.RESAMPLE_POINTS
REPR_COLS = 6
DEFAULT_FRACTIONS = (0.25, 0.5, 0.75, 1.0)
DEFAULT_TAU_V = 0.10

REAL = 1
GENERATED = 0

DEMO_HEADER = ["t", "sx", "sy", "sz", "ex", "ey", "ez", "hx", "hy", "hz"]


@dataclass
class Motion:
    """A robot joint-space motion (n, dof) or demonstrator marker motion (n, 3, 3)."""

    states: np.ndarray
    source: str = "robot"
    times: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.source not in ("robot", "demonstrator"):
            raise ValueError(f"unknown motion source {self.source!r}")
        if self.source == "robot" and self.states.ndim != 2:
            raise ValueError("robot motions are (n, dof) arrays of joint states")
        if self.source == "demonstrator" and self.states.shape[1:] != (3, 3):
            raise ValueError("demonstrator motions are (n, 3, 3) shoulder/elbow/hand frames")
        if len(self.states) < 2:
            raise ValueError("a motion needs at least two states")
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=np.float64)

    def __len__(self):
        return len(self.states)

    def markers(self, chain=None):
        if self.source == "demonstrator":
            return self.states
        if chain is None:
            raise ValueError("a kinematic chain is needed to place robot markers")
        return forward_kinematics_batch(chain, self.states)


def _markers(chain, motion):
    if isinstance(motion, Motion):
        return motion.markers(chain)
    arr = np.asarray(motion, dtype=np.float64)
    if arr.ndim == 3:
        return arr
    return forward_kinematics_batch(chain, arr)


def _encodable(chain, motion):
    M = _markers(chain, motion)
    if len(M) < 2:
        raise ValueError("a motion needs at least two states")
    if np.any(np.linalg.norm(M[:, 1] - M[:, 0], axis=1) == 0.0) or \
            np.any(np.linalg.norm(M[:, 2] - M[:, 1], axis=1) == 0.0):
        raise ValueError("zero-length arm segment")
    return M


def resample(chain, motion, count=REPR_ROWS):
    """Marker frames (count, 3, 3) spaced uniformly along the hand path."""
    M = _markers(chain, motion)
    if len(M) < 2:
        raise ValueError("a motion needs at least two states")
    return kernels.resample_markers(M, count)


def encode(chain, motion):
    return kernels.encode_markers(_encodable(chain, motion))


def check_repr(m, tol=1e-6):
    m = np.asarray(m)
    if m.shape != (REPR_ROWS, REPR_COLS):
        raise ValueError(f"motion representation must be {REPR_ROWS}x{REPR_COLS}, got {m.shape}")
    n1 = np.linalg.norm(m[:, :3], axis=1)
    n2 = np.linalg.norm(m[:, 3:], axis=1)
    if np.any(np.abs(n1 - 1) > tol) or np.any(np.abs(n2 - 1) > tol):
        raise ValueError("representation rows must hold unit directions")
    return m


def cut_prefix(M, fraction):
    """Marker frames from the start up to ``fraction`` of the hand arc length.

    The final frame is interpolated when the cut falls inside a segment.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"prefix fraction must lie in (0, 1], got {fraction}")
    M = np.asarray(M, dtype=np.float64)
    n = len(M)
    if fraction == 1.0:
        return M
    hand = M[:, -1]
    seg = np.sqrt(((hand[1:] - hand[:-1]) ** 2).sum(axis=1))
    cum = np.concatenate(([0.0], np.cumsum(seg)))
    total = cum[-1]
    if total < 1e-9:
        u = fraction * (n - 1)
        i = min(int(math.floor(u)), n - 2)
        t = u - i
    else:
        s = fraction * total
        i = min(int(np.searchsorted(cum[1:], s, side="left")), n - 2)
        t = (s - cum[i]) / seg[i] if seg[i] > 0 else 0.0
    t = min(max(t, 0.0), 1.0)
    cut = M[i] + t * (M[i + 1] - M[i])
    return np.concatenate((M[: i + 1], cut[None]), axis=0)


def prefix_representations(chain, motion, fractions=DEFAULT_FRACTIONS):
    fractions = list(fractions)
    if not fractions:
        raise ValueError("at least one prefix fraction is required")
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"prefix fraction must lie in (0, 1], got {f}")
    if any(b < a for a, b in zip(fractions, fractions[1:])) or fractions[-1] != 1.0:
        raise ValueError("fractions must be sorted ascending and end at 1.0")
    M = _encodable(chain, motion)
    return [kernels.encode_markers(cut_prefix(M, f)) for f in fractions]


def minimal_rotation(a, b):
    """Smallest rotation matrix taking unit vector ``a`` onto unit vector ``b``.

    For antipodal vectors the rotation is pi about the axis through
    (1, 0, 0) projected perpendicular to ``a`` (falls back to (0, 1, 0)).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    s = float(np.linalg.norm(v))
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        axis = np.array([1.0, 0.0, 0.0])
        axis = axis - np.dot(axis, a) * a
        if np.linalg.norm(axis) < 1e-9:
            axis = np.array([0.0, 1.0, 0.0]) - a[1] * a
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    K = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + K + K @ K * ((1.0 - c) / (s * s))


def mean_hand_direction(frames):
    d = frames[:, 2] - frames[:, 0]
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    return d.mean(axis=0)


def direction_normalize(motion):
    """Rotate a demonstrator motion about its base so the mean hand direction is +Z."""
    if motion.source != "demonstrator":
        raise ValueError("direction normalisation applies to demonstrator motions")
    frames = motion.states
    base = frames[0, 0]
    mean = mean_hand_direction(frames)
    norm = float(np.linalg.norm(mean))
    if norm <= 1e-6:
        raise ValueError("degenerate mean hand direction; motion rejected")
    R = minimal_rotation(mean / norm, np.array([0.0, 0.0, 1.0]))
    rotated = (frames - base) @ R.T + base
    return Motion(rotated, "demonstrator", motion.times, dict(motion.meta))


def hand_speeds(frames, dt):
    """Per-frame hand speed (backward difference; the first frame copies the second)."""
    hand = frames[:, 2]
    v = np.sqrt(((hand[1:] - hand[:-1]) ** 2).sum(axis=1)) / dt
    return np.concatenate((v[:1], v))


def velocity_split(motion, tau_v=DEFAULT_TAU_V, dt=None):
    """Cut a demonstrator motion into runs of frames whose hand speed is >= tau_v.

    Runs shorter than two frames are dropped. Each returned motion records
    its frame span in ``meta["span"]``.
    """
    if tau_v <= 0:
        raise ValueError("tau_v must be positive")
    if dt is None:
        if motion.times is None or len(motion.times) < 2:
            raise ValueError("frame period unknown: pass dt or provide timestamps")
        dt = float(np.median(np.diff(motion.times)))
    if dt <= 0:
        raise ValueError("dt must be positive")
    v = hand_speeds(motion.states, dt)
    fast = v >= tau_v
    out = []
    i, n = 0, len(v)
    while i < n:
        if not fast[i]:
            i += 1
            continue
        j = i
        while j < n and fast[j]:
            j += 1
        if j - i >= 2 and v[i:j].mean() >= tau_v:
            times = None if motion.times is None else motion.times[i:j]
            meta = dict(motion.meta, span=[i, j])
            out.append(Motion(motion.states[i:j], "demonstrator", times, meta))
        i = j
    return out


def retarget(frames, segment_lengths):
    """Rebuild marker frames at another arm scale, keeping every segment direction."""
    frames = np.asarray(frames, dtype=np.float64)
    l1, l2 = segment_lengths
    d1 = frames[:, 1] - frames[:, 0]
    d2 = frames[:, 2] - frames[:, 1]
    d1 = d1 / np.linalg.norm(d1, axis=1, keepdims=True)
    d2 = d2 / np.linalg.norm(d2, axis=1, keepdims=True)
    out = np.empty_like(frames)
    out[:, 0] = 0.0
    out[:, 1] = l1 * d1
    out[:, 2] = out[:, 1] + l2 * d2
    return out


def read_demonstration(path):
    """Load one demonstrator CSV; shoulders are translated to the origin."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != DEMO_HEADER:
            raise ValueError(f"{path}: expected header {','.join(DEMO_HEADER)}")
        for line in reader:
            if line:
                rows.append([float(v) for v in line])
    data = np.array(rows, dtype=np.float64).reshape(-1, 10)
    if len(data) < 2:
        raise ValueError(f"{path}: a recording needs at least two frames")
    if np.any(np.diff(data[:, 0]) <= 0):
        raise ValueError(f"{path}: timestamps must be strictly increasing")
    frames = data[:, 1:].reshape(-1, 3, 3)
    frames = frames - frames[:, :1, :]
    return Motion(frames, "demonstrator", data[:, 0], {"file": str(path)})


def write_demonstration(path, times, frames):
    frames = np.asarray(frames, dtype=np.float64).reshape(-1, 9)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEMO_HEADER)
        for t, row in zip(times, frames):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_manifest(path):
    """Dataset manifest: a JSON list of {"path": ..., "split": "train"|"test"}."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    entries = []
    for item in doc:
        if isinstance(item, str):
            item = {"path": item, "split": "train"}
        split = item.get("split", "train")
        if split not in ("train", "test"):
            raise ValueError(f"{path}: unknown split {split!r}")
        p = Path(item["path"])
        if not p.is_absolute():
            p = path.parent / p
        entries.append((p, split))
    return entries


class LabeledDataset:
    """Encoded motions with real/generated labels and provenance records."""

    def __init__(self, X=None, y=None, meta=None):
        self.X = np.zeros((0, REPR_ROWS, REPR_COLS)) if X is None else np.asarray(X, dtype=np.float64)
        self.y = np.zeros(0, dtype=np.int64) if y is None else np.asarray(y, dtype=np.int64)
        self.meta = [{} for _ in range(len(self.y))] if meta is None else list(meta)
        if self.X.ndim != 3 or self.X.shape[1:] != (REPR_ROWS, REPR_COLS):
            raise ValueError("dataset entries must be 30x6 representations")
        if not (len(self.X) == len(self.y) == len(self.meta)):
            raise ValueError("entries, labels and metadata must have equal length")
        if np.any((self.y != REAL) & (self.y != GENERATED)):
            raise ValueError("labels must be REAL (1) or GENERATED (0)")

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_reprs(cls, reprs, label, meta=None):
        reprs = list(reprs)
        X = np.stack(reprs) if reprs else None
        y = np.full(len(reprs), label, dtype=np.int64)
        return cls(X, y, meta if meta is not None else [{} for _ in reprs])

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls()
        X = np.concatenate([p.X for p in parts])
        y = np.concatenate([p.y for p in parts])
        meta = [m for p in parts for m in p.meta]
        return cls(X, y, meta)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return LabeledDataset(self.X[idx], self.y[idx], [self.meta[i] for i in idx])

    def has_both_labels(self):
        return bool(np.any(self.y == REAL) and np.any(self.y == GENERATED))

    def require_both_labels(self):
        if len(self) == 0:
            raise ValueError("dataset is empty")
        if not self.has_both_labels():
            raise ValueError("dataset must contain both real and generated entries")
