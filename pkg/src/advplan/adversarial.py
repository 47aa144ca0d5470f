"""The alternating loop: plan motions, train the discriminator on real vs planned, repeat."""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collision import Scene, motion_in_collision
from .motion_repr import (
    DEFAULT_FRACTIONS,
    GENERATED,
    REAL,
    LabeledDataset,
    Motion,
    encode,
    prefix_representations,
    resample,
)
from .neuralnet import Discriminator, TrainConfig, accuracy, train
from .planner import (
    DEFAULT_LENGTH_WEIGHT,
    AdversarialObjective,
    LengthObjective,
    PlannerConfig,
    PlanningError,
    PlanningFailure,
    PlanningProblem,
    plan,
)

log = logging.getLogger(__name__)


class LoopError(Exception):
    """Raised when an iteration produces no motions at all."""


@dataclass
class Query:
    start: np.ndarray
    goals: list
    name: str = ""


@dataclass
class LoopConfig:
    iterations: int
    queries: list
    accumulate_generated: bool = True
    per_iteration_cap: int = 5000
    train: TrainConfig = field(default_factory=TrainConfig)
    fractions: tuple = DEFAULT_FRACTIONS
    rng_seed: int = 0
    budget: int = 2000
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    length_weight: float = DEFAULT_LENGTH_WEIGHT
    held_out_fraction: float = 0.2
    eval_queries: list | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not self.queries:
            raise ValueError("the loop needs at least one query")
        if self.per_iteration_cap < 1:
            raise ValueError("per_iteration_cap must be positive")
        if not 0.0 <= self.held_out_fraction < 1.0:
            raise ValueError("held_out_fraction must lie in [0, 1)")


@dataclass
class IterationReport:
    iteration: int
    train_accuracy: float
    held_out_accuracy: float
    mean_final_score: float | None
    metrics: dict
    planned: int
    failed: int
    generated_entries: int
    wall_time: float = 0.0

    def to_dict(self):
        # wall time is left out so reports stay byte-reproducible
        return {
            "iteration": self.iteration,
            "train_accuracy": self.train_accuracy,
            "held_out_accuracy": self.held_out_accuracy,
            "mean_final_score": self.mean_final_score,
            "metrics": self.metrics,
            "planned": self.planned,
            "failed": self.failed,
            "generated_entries": self.generated_entries,
        }


@dataclass
class LoopResult:
    reports: list
    discriminator: Discriminator
    archives: list
    eval_archives: list = field(default_factory=list)


def query_seed(rng_seed, index):
    """Planner seed for query ``index``; shared by targets, naive and adversarial plans."""
    return int(np.random.SeedSequence([int(rng_seed), int(index)]).generate_state(1)[0])


def _plan_one(args):
    chain, query, index, objective, scene, budget, planner_config, rng_seed = args
    problem = PlanningProblem(query.start, query.goals, scene, objective, query_seed(rng_seed, index), budget)
    try:
        return plan(chain, problem, planner_config).motion
    except (PlanningFailure, PlanningError) as exc:
        log.warning("query %d (%s) skipped: %s", index, query.name, exc)
        return None


def plan_queries(chain, queries, objective, scene, budget, planner_config, rng_seed, jobs=1):
    """Plan every query; failed queries map to ``None``. Order follows ``queries``."""
    tasks = [(chain, q, i, objective, scene, budget, planner_config, rng_seed) for i, q in enumerate(queries)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_plan_one, tasks))
    return [_plan_one(t) for t in tasks]


def evaluate_success_rate(chain, motions, hidden_scene, resolution=None):
    """Fraction of motions that never touch ``hidden_scene``."""
    motions = [m for m in motions]
    if not motions:
        raise ValueError("no motions to evaluate")
    kw = {} if resolution is None else {"resolution": resolution}
    free = [not motion_in_collision(chain, m.states, hidden_scene, **kw) for m in motions]
    return float(np.mean(free))


def evaluate_rmse(chain, planned, reference):
    """Elbow and hand RMSE in meters between paired motions, each resampled to 30 points.

    Robot motions go through forward kinematics; demonstrator frames are
    compared as given, so both sides must already share one arm scale.
    """
    if len(planned) != len(reference):
        raise ValueError("planned and reference lists differ in length")
    if not planned:
        raise ValueError("no motions to evaluate")
    elbow, hand = [], []
    for p, r in zip(planned, reference):
        a = resample(chain, p)
        b = resample(chain, r)
        elbow.append(np.sum((a[:, 1] - b[:, 1]) ** 2, axis=1))
        hand.append(np.sum((a[:, 2] - b[:, 2]) ** 2, axis=1))
    return float(np.sqrt(np.mean(np.concatenate(elbow)))), float(np.sqrt(np.mean(np.concatenate(hand))))


def _motion_dataset(chain, motions, label, fractions, iteration):
    reprs, meta = [], []
    for qi, m in enumerate(motions):
        if m is None:
            continue
        for f, r in zip(fractions, prefix_representations(chain, m, fractions)):
            reprs.append(r)
            meta.append({"iteration": iteration, "query": qi, "fraction": f})
    return LabeledDataset.from_reprs(reprs, label, meta)


def drop_conflicts(real, generated):
    """Remove generated entries that are bit-identical to a real entry."""
    seen = {x.tobytes() for x in real.X}
    keep = [i for i, x in enumerate(generated.X) if x.tobytes() not in seen]
    return generated.subset(keep)


def _split(dataset, fraction, rng):
    """Train/held-out split that keeps all prefixes of one motion together."""
    keys = sorted({(m.get("iteration", -1), m.get("query", i), dataset.y[i]) for i, m in enumerate(dataset.meta)},
                  key=lambda k: (int(k[2]), k[0], k[1]))
    if fraction <= 0.0 or len(keys) < 4:
        return dataset, LabeledDataset()
    order = rng.permutation(len(keys))
    held = {keys[i] for i in order[: int(round(fraction * len(keys)))]}
    tags = [(m.get("iteration", -1), m.get("query", i), dataset.y[i]) for i, m in enumerate(dataset.meta)]
    train_idx = [i for i, t in enumerate(tags) if t not in held]
    held_idx = [i for i, t in enumerate(tags) if t in held]
    train_set, held_set = dataset.subset(train_idx), dataset.subset(held_idx)
    if not train_set.has_both_labels():
        return dataset, LabeledDataset()
    return train_set, held_set


def run_loop(chain, target_set, config, scene=None, metric=None, out_dir=None):
    """Alternate planning and discriminator training.

    Round ``k`` plans every query (length-only when ``k == 0``, otherwise
    against the discriminator from round ``k - 1``), adds the encoded
    prefixes to the generated pool and trains a fresh discriminator on
    real vs generated. ``metric(motions, eval_motions)`` returns a dict
    that is stored in the round's report.
    """
    if len(target_set) == 0:
        raise ValueError("target set is empty")
    if np.any(target_set.y != REAL):
        raise ValueError("target set must hold real entries only")
    scene = scene or Scene()
    pool = []
    d = None
    reports, archives, eval_archives = [], [], []
    for k in range(config.iterations):
        t0 = time.perf_counter()
        if k == 0:
            objective = LengthObjective()
        else:
            objective = AdversarialObjective(d, config.length_weight)
        motions = plan_queries(chain, config.queries, objective, scene, config.budget, config.planner,
                               config.rng_seed, config.jobs)
        ok = [m for m in motions if m is not None]
        if not ok:
            raise LoopError(f"iteration {k}: every query failed")
        eval_motions = None
        if config.eval_queries:
            eval_motions = plan_queries(chain, config.eval_queries, objective, scene, config.budget,
                                        config.planner, config.rng_seed + 7919, config.jobs)
        generated = _motion_dataset(chain, motions, GENERATED, config.fractions, k)
        generated = drop_conflicts(target_set, generated)
        if config.accumulate_generated:
            pool.append(generated)
            while sum(len(p) for p in pool) > config.per_iteration_cap and len(pool) > 1:
                pool.pop(0)
            gen_all = LabeledDataset.concat(pool)
            if len(gen_all) > config.per_iteration_cap:
                gen_all = gen_all.subset(np.arange(len(gen_all) - config.per_iteration_cap, len(gen_all)))
        else:
            gen_all = generated
        data = LabeledDataset.concat([target_set, gen_all])
        split_rng = np.random.default_rng([config.rng_seed, k, 1])
        train_set, held_set = _split(data, config.held_out_fraction, split_rng)
        tc = TrainConfig.from_dict({**config.train.to_dict(), "rng_seed": int(config.rng_seed * 1000 + k)})
        d, _ = train(Discriminator.initialize(tc.rng_seed), train_set, tc)
        scores = [m.meta["report"]["final_score"] for m in ok]
        report = IterationReport(
            iteration=k,
            train_accuracy=accuracy(d, train_set),
            held_out_accuracy=accuracy(d, held_set) if len(held_set) else float("nan"),
            mean_final_score=None if k == 0 else float(np.mean(scores)),
            metrics=metric(motions, eval_motions) if metric else {},
            planned=len(ok),
            failed=len(motions) - len(ok),
            generated_entries=len(gen_all),
        )
        report.wall_time = time.perf_counter() - t0
        log.info("iteration %d: planned %d, failed %d, held-out accuracy %.3f, metrics %s (%.1fs)",
                 k, report.planned, report.failed, report.held_out_accuracy, report.metrics, report.wall_time)
        reports.append(report)
        archives.append(motions)
        eval_archives.append(eval_motions)
        if out_dir is not None:
            write_iteration(Path(out_dir) / f"iter_{k}", chain, motions, d, report, eval_motions)
    return LoopResult(reports, d, archives, eval_archives)


# --- run directory -------------------------------------------------------------------------

def dump_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def write_robot_motion(path, motion, report, representation=None):
    """CSV ``step,q1..qd`` plus a JSON sidecar with the cost report (and optional encoding)."""
    path = Path(path)
    d = motion.states.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + [f"q{j + 1}" for j in range(d)])
        for i, q in enumerate(motion.states):
            w.writerow([i] + [repr(float(v)) for v in q])
    side = dict(report)
    if representation is not None:
        side["representation"] = [[float(v) for v in row] for row in representation]
    dump_json(path.with_suffix(".json"), side)


def read_robot_motion(path):
    """Inverse of :func:`write_robot_motion`; returns (Motion, sidecar dict)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[0] != "step" or any(h != f"q{j + 1}" for j, h in enumerate(header[1:])):
        raise ValueError(f"{path}: unexpected header {header}")
    states = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    side_path = path.with_suffix(".json")
    side = json.loads(side_path.read_text(encoding="utf-8")) if side_path.exists() else {}
    return Motion(states, "robot", meta={"report": side}), side


def write_iteration(directory, chain, motions, d, report, eval_motions=None):
    """Planned motions as ``motions/q<i>.csv``, evaluation motions as ``motions/e<i>.csv``."""
    directory = Path(directory)
    (directory / "motions").mkdir(parents=True, exist_ok=True)
    for prefix, group in (("q", motions), ("e", eval_motions or [])):
        for qi, m in enumerate(group):
            if m is None:
                continue
            write_robot_motion(directory / "motions" / f"{prefix}{qi:04d}.csv", m, m.meta["report"],
                               encode(chain, m))
    d.save(directory / "model.idsc")
    dump_json(directory / "report.json", report.to_dict())
