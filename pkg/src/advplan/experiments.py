"""Experiment configuration and the two built-in fixtures (hidden sphere, curved demonstrations)."""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import numpy as np

from .adversarial import LoopConfig, Query
from .collision import Scene, markers_in_collision
from .kinematics import KinematicChain, forward_kinematics_batch, inverse_kinematics, sample_goal_states
from .motion_repr import LabeledDataset, Motion, encode
from .neuralnet import TrainConfig
from .planner import PlannerConfig


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# Sphere sits in front of the goal line, just above the shoulder-to-goal axis, so
# direct reaches sweep through it while detours and some elbow swivels clear it.
SPHERE_BASE = {
    "experiment": "sphere",
    "chain": None,
    "scene": {"spheres": [{"center": [0.20, 0.0, -0.08], "radius": 0.10}], "link_radius": 0.03},
    "starts": {
        "count": 10,
        # asymmetric yaw range: the start set leans to one side
        "lower": [-0.6, 0.9, -0.4, -1.6, -0.5, -0.5, -0.5],
        "upper": [0.2, 1.5, 0.4, -0.8, 0.5, 0.5, 0.5],
    },
    "goal_line": {"a": [0.35, -0.15, -0.20], "b": [0.35, 0.15, -0.20], "count": 21},
    "goals_per_pose": 16,
    "budget": 2000,
    "planner": {},
    "loop": {
        "iterations": 3,
        "accumulate_generated": True,
        "per_iteration_cap": 5000,
        "fractions": [0.25, 0.5, 0.75, 1.0],
        "length_weight": 0.05,
        "held_out_fraction": 0.2,
        "train": {"epochs": 10, "learning_rate": 0.001, "batch_size": 64},
    },
    "seed": 0,
    "out": "runs/sphere",
}

PRESETS = {
    "paper": {},
    "desk": {"starts": {"count": 5}, "goal_line": {"count": 11}, "budget": 2000, "loop": {"iterations": 3},
             "out": "runs/desk"},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def sphere_config(preset="paper", overrides=None):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return _merge(_merge(SPHERE_BASE, PRESETS[preset]), overrides or {})


def load_config(path=None, preset=None, seed=None, out=None):
    """Merge preset, config file and command-line overrides (later wins)."""
    doc = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if "advplan_version" in doc and isinstance(doc.get("config"), dict):
            doc = doc["config"]  # a run.json reproduces its run
    kind = doc.get("experiment", "sphere")
    if kind == "sphere":
        cfg = sphere_config(preset or doc.get("preset", "paper"), doc)
    elif kind == "imitation":
        cfg = _merge(IMITATION_BASE, doc)
    else:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    cfg.pop("preset", None)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["out"] = str(out)
    validate_config(cfg, base=path.parent if path is not None else None)
    return cfg


def validate_config(cfg, base=None):
    loop = cfg.get("loop", {})
    if int(loop.get("iterations", 1)) < 1:
        raise ConfigError("loop.iterations must be at least 1")
    if cfg["experiment"] == "sphere":
        if int(cfg["goal_line"]["count"]) < 1:
            raise ConfigError("goal_line.count must be at least 1")
        starts = cfg["starts"]
        if "states" not in starts and int(starts.get("count", 0)) < 1:
            raise ConfigError("starts.count must be at least 1")
    if isinstance(cfg.get("chain"), dict):
        try:
            KinematicChain.from_dict(cfg["chain"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"chain: {exc}") from exc
    elif cfg.get("chain"):
        cfg["chain"] = str(_resolve(cfg["chain"], base, "chain file"))
    if cfg.get("manifest"):
        cfg["manifest"] = str(_resolve(cfg["manifest"], base, "demonstration manifest"))
    try:
        PlannerConfig.from_dict(cfg.get("planner"))
        TrainConfig.from_dict(loop.get("train"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _resolve(path, base, what):
    p = Path(path)
    if base is not None and not p.is_absolute():
        p = base / p
    if not p.exists():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def chain_for(cfg):
    if isinstance(cfg.get("chain"), dict):
        return KinematicChain.from_dict(cfg["chain"])
    return KinematicChain.from_json(cfg["chain"]) if cfg.get("chain") else KinematicChain.default()


def frozen_config(cfg):
    """Config for run.json: chain inlined, output location dropped so copies of a run stay identical."""
    frozen = copy.deepcopy(cfg)
    frozen["chain"] = chain_for(cfg).to_dict()
    frozen.pop("out", None)
    return frozen


def scene_for(cfg):
    try:
        return Scene.from_dict(cfg.get("scene"))
    except ValueError as exc:
        raise ConfigError(f"scene: {exc}") from exc


def sample_starts(chain, cfg, scene):
    """Explicit start states, or ``count`` collision-free draws from the configured joint box."""
    spec = cfg["starts"]
    if "states" in spec:
        starts = [chain.check_state(s) for s in spec["states"]]
        for i, s in enumerate(starts):
            if not chain.within_limits(s):
                raise ConfigError(f"start {i} violates joint limits")
            if markers_in_collision(forward_kinematics_batch(chain, s[None]), scene)[0]:
                raise ConfigError(f"start {i} collides with the scene")
        return starts
    lo = np.maximum(np.asarray(spec.get("lower", chain.lower), dtype=np.float64), chain.lower)
    hi = np.minimum(np.asarray(spec.get("upper", chain.upper), dtype=np.float64), chain.upper)
    rng = np.random.default_rng([int(cfg["seed"]), 17])
    starts = []
    for _ in range(1000 * int(spec["count"])):
        q = rng.uniform(lo, hi)
        if not markers_in_collision(forward_kinematics_batch(chain, q[None]), scene)[0]:
            starts.append(q)
            if len(starts) == int(spec["count"]):
                return starts
    raise ConfigError("could not draw collision-free starts from the configured box")


def goal_poses(cfg):
    line = cfg["goal_line"]
    a, b, n = np.asarray(line["a"], dtype=np.float64), np.asarray(line["b"], dtype=np.float64), int(line["count"])
    t = np.linspace(0.0, 1.0, n) if n > 1 else np.array([0.5])
    return [a + ti * (b - a) for ti in t]


def goal_state_sets(chain, cfg, scene):
    """IK goal states per goal pose; poses whose every state touches the scene are config errors."""
    sets = []
    for i, p in enumerate(goal_poses(cfg)):
        states = sample_goal_states(chain, p, int(cfg["goals_per_pose"]), [int(cfg["seed"]), 29, i])
        if not states:
            raise ConfigError(f"goal {i} at {p.tolist()} is unreachable")
        if not scene.empty:
            hit = markers_in_collision(forward_kinematics_batch(chain, np.stack(states)), scene)
            if hit.all():
                raise ConfigError(f"goal {i} at {p.tolist()} collides with the sphere for every sampled swivel")
        sets.append(states)
    return sets


def sphere_queries(chain, cfg, scene):
    starts = sample_starts(chain, cfg, scene)
    sets = goal_state_sets(chain, cfg, scene)
    return [Query(s, g, f"s{si}_g{gi}") for si, s in enumerate(starts) for gi, g in enumerate(sets)]


def loop_config(cfg, queries, eval_queries=None, jobs=1, adversarial_rounds=True):
    """Build a LoopConfig; ``iterations`` counts adversarial rounds, so one naive round is added."""
    loop = cfg["loop"]
    iterations = int(loop["iterations"]) + (1 if adversarial_rounds else 0)
    return LoopConfig(
        iterations=iterations,
        queries=queries,
        accumulate_generated=bool(loop.get("accumulate_generated", True)),
        per_iteration_cap=int(loop.get("per_iteration_cap", 5000)),
        train=TrainConfig.from_dict(loop.get("train")),
        fractions=tuple(float(f) for f in loop.get("fractions", (0.25, 0.5, 0.75, 1.0))),
        rng_seed=int(cfg["seed"]),
        budget=int(cfg["budget"]),
        planner=PlannerConfig.from_dict(cfg.get("planner")),
        length_weight=float(loop.get("length_weight", 0.05)),
        held_out_fraction=float(loop.get("held_out_fraction", 0.2)),
        eval_queries=eval_queries,
        jobs=int(jobs),
    )


def toy_motion_set(chain, count, seed, steps=20):
    """Separable motions: real ones keep the upper arm pitched toward +X, generated ones toward -X.

    Each of the ``count`` pairs is a straight joint-space line; the shoulder
    pitch (joint 2) is drawn from mirrored ranges depending on the label.
    """
    rng = np.random.default_rng([int(seed), 53])
    lo = np.full(chain.dof, -0.4)
    hi = np.full(chain.dof, 0.4)
    t = np.linspace(0.0, 1.0, steps)[:, None]
    reprs, labels, meta = [], [], []
    for i in range(int(count)):
        for label, sign in ((1, 1.0), (0, -1.0)):
            a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
            a[1], b[1] = sign * rng.uniform(0.5, 1.2, size=2)
            reprs.append(encode(chain, Motion(a + t * (b - a))))
            labels.append(label)
            meta.append({"query": i})
    return LabeledDataset(np.stack(reprs), np.array(labels), meta)


# --- curved demonstrations ------------------------------------------------------------------

IMITATION_BASE = {
    "experiment": "imitation",
    "chain": None,
    "demos": {"train": 150, "test": 40, "frames": 40, "duration": 1.0, "travel": [0.06, 0.10], "bow": 1.2,
              "bow_side": [0.0, 1.0, 0.0], "tilt": 0.4, "rest_frames": 5},
    "manifest": None,
    "goals_per_pose": 16,
    "budget": 2000,
    "planner": {},
    "loop": {
        "iterations": 3,
        "accumulate_generated": True,
        "per_iteration_cap": 5000,
        "fractions": [0.25, 0.5, 0.75, 1.0],
        "length_weight": 0.05,
        "held_out_fraction": 0.2,
        # smaller batches: 64 leaves D near chance on this fixture
        "train": {"epochs": 10, "learning_rate": 0.001, "batch_size": 16},
    },
    "seed": 0,
    "out": "runs/imitation",
}


def elbow_toward(shoulder, hand, pole, segment_lengths):
    """Elbow on its swivel circle, as close as possible to the direction ``pole``."""
    l1, l2 = segment_lengths
    axis = np.asarray(hand, dtype=np.float64) - shoulder
    dist = float(np.linalg.norm(axis))
    u = axis / dist
    a = (l1 * l1 - l2 * l2 + dist * dist) / (2.0 * dist)
    r = math.sqrt(max(l1 * l1 - a * a, 0.0))
    p = np.asarray(pole, dtype=np.float64)
    p = p - np.dot(p, u) * u
    return shoulder + a * u + r * p / np.linalg.norm(p)


def _min_jerk(t):
    return t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)


def synth_demonstration(rng, cfg):
    """One raw recording: a short reach whose elbow bows sideways mid-motion.

    The bow always points toward ``bow_side`` (a world direction), which is
    the habit the discriminator is meant to pick up. Frames are produced at
    a human arm scale, tilted away from +Z, offset from the origin, and
    padded with rest frames so the preprocessing has work to do.
    """
    spec = cfg["demos"]
    n, duration = int(spec["frames"]), float(spec["duration"])
    human = (0.29, 0.27)
    reach = rng.uniform(0.42, 0.50) * sum(human) / 0.55
    polar, azim = rng.uniform(0.25, 0.55), rng.uniform(0.0, 2.0 * math.pi)
    u0 = np.array([math.sin(polar) * math.cos(azim), math.sin(polar) * math.sin(azim), math.cos(polar)])
    h0 = reach * u0
    travel = rng.normal(size=3)
    travel -= np.dot(travel, u0) * u0
    travel *= rng.uniform(*spec["travel"]) / np.linalg.norm(travel)
    side = np.asarray(spec.get("bow_side", (0.0, 1.0, 0.0)), dtype=np.float64)
    side = side - np.dot(side, u0) * u0
    side /= np.linalg.norm(side)
    pole0 = np.array([0.0, 0.0, -1.0]) + rng.normal(scale=0.3, size=3)
    t = _min_jerk(np.linspace(0.0, 1.0, n))
    frames = np.empty((n, 3, 3))
    for i, ti in enumerate(t):
        h = h0 + ti * travel
        pole = pole0 + float(spec["bow"]) * math.sin(math.pi * ti) * side
        frames[i] = (np.zeros(3), elbow_toward(np.zeros(3), h, pole, human), h)
    rest = int(spec.get("rest_frames", 5))
    frames = np.concatenate([np.repeat(frames[:1], rest, 0), frames, np.repeat(frames[-1:], rest, 0)])
    tilt = _tilt(rng.uniform(-1.0, 1.0, size=2) * float(spec.get("tilt", 0.4)))
    frames = frames @ tilt.T + rng.uniform(-1.0, 1.0, size=3)
    times = np.arange(len(frames)) * (duration / (n - 1))
    return times, frames


def _tilt(angles):
    ax, ay = angles
    rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    return ry @ rx


def write_demonstration_set(directory, cfg):
    """Write the synthetic recordings and their manifest; returns the manifest path."""
    from .motion_repr import write_demonstration

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([int(cfg["seed"]), 41])
    entries = []
    for split in ("train", "test"):
        for i in range(int(cfg["demos"][split])):
            times, frames = synth_demonstration(rng, cfg)
            name = f"{split}_{i:03d}.csv"
            write_demonstration(directory / name, times, frames)
            entries.append({"path": name, "split": split})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")
    return manifest


def prepare_demonstrations(manifest, chain, tau_v=None):
    """Recordings -> velocity-split segments at the robot's arm scale, direction-normalized."""
    from .motion_repr import DEFAULT_TAU_V, direction_normalize, read_demonstration, retarget, velocity_split

    tau_v = DEFAULT_TAU_V if tau_v is None else tau_v
    out = {"train": [], "test": []}
    for path, split in read_manifest_checked(manifest):
        raw = read_demonstration(path)
        for seg in velocity_split(raw, tau_v):
            # retarget first: the rotation that follows keeps segment lengths
            scaled = Motion(retarget(seg.states, chain.segment_lengths), "demonstrator", seg.times, dict(seg.meta))
            try:
                out[split].append(direction_normalize(scaled))
            except ValueError:
                continue
    return out


def read_manifest_checked(manifest):
    from .motion_repr import read_manifest

    manifest = Path(manifest)
    if not manifest.exists():
        raise ConfigError(f"demonstration manifest {manifest} does not exist")
    entries = read_manifest(manifest)
    for p, _ in entries:
        if not p.exists():
            raise ConfigError(f"manifest entry {p} does not exist")
    return entries


def _ik_all(chain, hand, swivel):
    from .kinematics import IKFailure, analytic_seeds

    sols = []
    for seed in analytic_seeds(chain, hand, swivel):
        try:
            sols.append(inverse_kinematics(chain, hand, swivel, seed))
        except IKFailure:
            pass
    return sols


def demonstration_query(chain, demo, name=""):
    """Start and goal joint states that reproduce the recording's first and last frames."""
    from .kinematics import swivel_angle

    f0, f1 = demo.states[0], demo.states[-1]
    starts = _ik_all(chain, f0[2], swivel_angle(*f0))
    if not starts:
        return None
    start = min(starts, key=lambda q: (float(np.linalg.norm(q)), q.tolist()))
    goals = _ik_all(chain, f1[2], swivel_angle(*f1))
    if not goals:
        return None
    goal = min(goals, key=lambda q: (float(np.linalg.norm(q - start)), q.tolist()))
    return Query(start, [goal], name)
