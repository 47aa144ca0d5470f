import json

import numpy as np
import pytest

from advplan.adversarial import (
    LoopConfig,
    LoopError,
    Query,
    _motion_dataset,
    drop_conflicts,
    evaluate_rmse,
    evaluate_success_rate,
    plan_queries,
    query_seed,
    read_robot_motion,
    run_loop,
    write_robot_motion,
)
from advplan.collision import Scene, Sphere
from advplan.kinematics import KinematicChain, forward_kinematics_batch
from advplan.motion_repr import GENERATED, REAL, LabeledDataset, Motion, encode
from advplan.neuralnet import Discriminator, TrainConfig
from advplan.planner import LengthObjective, PlannerConfig

FRACTIONS = (0.5, 1.0)


@pytest.fixture(scope="module")
def arm():
    return KinematicChain.default()


def queries(n=6, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        start = np.array([0.3, 0.8, 0.0, 1.0, 0, 0, 0]) + rng.uniform(-0.2, 0.2, 7)
        goal = start + rng.uniform(-0.25, 0.25, 7)
        out.append(Query(start, [goal], f"q{i}"))
    return out


def small_config(qs, **kw):
    base = dict(iterations=2, queries=qs, fractions=FRACTIONS, budget=250, train=TrainConfig(epochs=2),
                rng_seed=3)
    base.update(kw)
    return LoopConfig(**base)


def targets(arm, qs, seed):
    motions = plan_queries(arm, qs, LengthObjective(), Scene(), 250, PlannerConfig(), seed)
    return _motion_dataset(arm, motions, REAL, FRACTIONS, -1)


@pytest.fixture(scope="module")
def loop_run(arm, tmp_path_factory):
    qs = queries()
    out = tmp_path_factory.mktemp("run")
    target = targets(arm, qs, 99)
    res = run_loop(arm, target, small_config(qs), out_dir=out)
    return res, out, qs, target


def test_success_rate(arm):
    motions = [Motion(np.zeros((2, 7))), Motion(np.zeros((2, 7)))]
    assert evaluate_success_rate(arm, motions, Scene()) == 1.0
    far = Scene((Sphere((2, 2, 2), 0.1),))
    assert evaluate_success_rate(arm, motions, far) == 1.0
    # the upright arm passes straight through a sphere on the Z axis
    blocked = Scene((Sphere((0, 0, 0.4), 0.05),))
    assert evaluate_success_rate(arm, motions, blocked) == 0.0
    with pytest.raises(ValueError):
        evaluate_success_rate(arm, [], Scene())


def _demo(frames):
    return Motion(frames, "demonstrator")


def test_rmse_identity_and_uniform_offset(arm):
    q = np.linspace([0.1, 0.5, 0, 1.0, 0, 0, 0], [0.4, 0.9, 0.2, 1.3, 0, 0, 0], 12)
    robot = Motion(q)
    frames = forward_kinematics_batch(arm, q)
    assert evaluate_rmse(arm, [robot], [_demo(frames)]) == pytest.approx((0.0, 0.0), abs=1e-12)
    shifted = _demo(frames + np.array([0.1, 0.0, 0.0]))
    e, h = evaluate_rmse(arm, [robot], [shifted])
    assert e == pytest.approx(0.1, abs=1e-12) and h == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ValueError):
        evaluate_rmse(arm, [robot], [])


def test_one_report_per_iteration(loop_run):
    res, _, qs, _ = loop_run
    assert [r.iteration for r in res.reports] == [0, 1]
    assert res.reports[0].mean_final_score is None
    assert res.reports[1].mean_final_score is not None
    assert len(res.archives) == 2 and all(len(a) == len(qs) for a in res.archives)
    assert all(r.planned + r.failed == len(qs) for r in res.reports)


def test_run_directory_layout(loop_run):
    res, out, _, _ = loop_run
    for k in range(2):
        it = out / f"iter_{k}"
        assert (it / "model.idsc").exists()
        report = json.loads((it / "report.json").read_text())
        assert report == json.loads(json.dumps(res.reports[k].to_dict()))
        assert "wall_time" not in report
    assert sorted(p.name for p in (out / "iter_0" / "motions").glob("*.csv"))[0] == "q0000.csv"


def test_archive_replays_bit_exactly(arm, loop_run):
    _, out, _, _ = loop_run
    for path in sorted((out / "iter_1" / "motions").glob("*.csv")):
        motion, side = read_robot_motion(path)
        assert np.array_equal(encode(arm, motion), np.array(side["representation"]))
        assert set(side) >= {"cost", "final_score", "length", "node_count", "seed"}


def test_checkpoint_matches_final_discriminator(loop_run):
    res, out, _, _ = loop_run
    d = Discriminator.load(out / "iter_1" / "model.idsc")
    assert np.array_equal(d.flat(), res.discriminator.flat())


def test_runs_are_reproducible(arm, loop_run):
    res, _, qs, target = loop_run
    again = run_loop(arm, target, small_config(qs))
    assert [r.to_dict() for r in again.reports] == [r.to_dict() for r in res.reports]
    for a, b in zip(again.archives[1], res.archives[1]):
        assert (a is None and b is None) or np.array_equal(a.states, b.states)


def test_parallel_planning_matches_serial(arm):
    qs = queries(4, 1)
    serial = plan_queries(arm, qs, LengthObjective(), Scene(), 200, PlannerConfig(), 0, jobs=1)
    parallel = plan_queries(arm, qs, LengthObjective(), Scene(), 200, PlannerConfig(), 0, jobs=2)
    for a, b in zip(serial, parallel):
        assert (a is None and b is None) or a.states.tobytes() == b.states.tobytes()


def test_generated_pool_without_accumulation(arm):
    qs = queries(4, 2)
    res = run_loop(arm, targets(arm, queries(4, 20), 50), small_config(qs, accumulate_generated=False))
    for r in res.reports:
        assert r.generated_entries == r.planned * len(FRACTIONS)


def test_generated_pool_cap_evicts_oldest(arm):
    qs = queries(4, 2)
    res = run_loop(arm, targets(arm, queries(4, 20), 50), small_config(qs, iterations=3, per_iteration_cap=10))
    assert all(r.generated_entries <= 10 for r in res.reports)


def test_label_hygiene():
    X = np.random.default_rng(0).normal(size=(4, 30, 6))
    real = LabeledDataset.from_reprs(X[:2], REAL)
    gen = LabeledDataset.from_reprs([X[1], X[2], X[3]], GENERATED)
    kept = drop_conflicts(real, gen)
    assert len(kept) == 2
    assert not ({x.tobytes() for x in kept.X} & {x.tobytes() for x in real.X})


def test_self_imitation_is_near_chance(arm):
    # real and generated motions come from the same planner on queries from the same distribution
    qs = queries(24, 4)
    res = run_loop(arm, targets(arm, queries(24, 40), 1234),
                   small_config(qs, iterations=1, train=TrainConfig(), held_out_fraction=0.3))
    assert res.reports[0].held_out_accuracy <= 0.65


def test_all_queries_failing_is_a_loop_error(arm):
    qs = queries(2, 5)
    with pytest.raises(LoopError):
        run_loop(arm, targets(arm, qs, 7), small_config(qs, budget=2))


def test_loop_config_validation():
    with pytest.raises(ValueError):
        LoopConfig(iterations=0, queries=queries(1))
    with pytest.raises(ValueError):
        LoopConfig(iterations=1, queries=[])


def test_run_loop_rejects_bad_target_sets(arm):
    qs = queries(2)
    with pytest.raises(ValueError):
        run_loop(arm, LabeledDataset(), small_config(qs))
    gen = LabeledDataset.from_reprs([np.zeros((30, 6))], GENERATED)
    with pytest.raises(ValueError):
        run_loop(arm, gen, small_config(qs))


def test_query_seeds_are_distinct_and_stable():
    seeds = [query_seed(0, i) for i in range(50)]
    assert len(set(seeds)) == 50
    assert seeds == [query_seed(0, i) for i in range(50)]


def test_robot_motion_round_trip(tmp_path):
    states = np.random.default_rng(1).normal(size=(5, 7))
    path = tmp_path / "m.csv"
    write_robot_motion(path, Motion(states), {"cost": 1.5, "seed": 3})
    motion, side = read_robot_motion(path)
    assert motion.states.tobytes() == states.tobytes()
    assert side == {"cost": 1.5, "seed": 3}
    assert path.read_text().splitlines()[0] == "step,q1,q2,q3,q4,q5,q6,q7"
