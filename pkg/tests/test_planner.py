import numpy as np
import pytest

from advplan.collision import Scene, Sphere, motion_in_collision
from advplan.experiments import toy_motion_set
from advplan.kinematics import KinematicChain
from advplan.motion_repr import encode
from advplan.neuralnet import Discriminator, TrainConfig, train
from advplan.planner import (
    AdversarialObjective,
    LengthObjective,
    PlannerConfig,
    PlanningError,
    PlanningFailure,
    PlanningProblem,
    Tree,
    edge_cost,
    plan,
    rewire_propagate,
)


class ConstantD:
    """Stub discriminator that scores every prefix the same."""

    def __init__(self, value):
        self.value = value

    def scorer(self):
        return lambda X: np.full(len(X), self.value)


def planar():
    return KinematicChain([[0, 0, 1], [0, 0, 1]], [[1, 0, 0], [1, 0, 0]], [[-3, 3], [-3, 3]], [0, 1, 2])


@pytest.fixture(scope="module")
def arm():
    return KinematicChain.default()


def _query(arm):
    start = np.array([0.3, 0.8, 0.0, 1.0, 0, 0, 0])
    goals = [np.array([0.1, 0.7, 0.15, 1.15, 0, 0, 0]), np.array([0.05, 0.85, -0.1, 0.9, 0, 0, 0])]
    return start, goals


def _check_tree_consistency(tree):
    for i in range(1, tree.n):
        p = tree.parent[i]
        assert tree.cost[i] == tree.cost[p] + tree.edge[i]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_telescoping_identity_with_zero_length_weight(arm, seed):
    start, goals = _query(arm)
    objective = AdversarialObjective(Discriminator.initialize(seed), length_weight=0.0)
    res = plan(arm, PlanningProblem(start, goals, objective=objective, rng_seed=seed, budget=300), keep_tree=True)
    tree = res.tree
    np.testing.assert_allclose(tree.cost[:tree.n], -tree.score[:tree.n], rtol=0, atol=1e-9)
    # cached scores are the scores of the current prefixes
    fresh = tree.evaluate(np.arange(1, tree.n))
    np.testing.assert_allclose(fresh, tree.score[1:tree.n], rtol=0, atol=1e-12)
    _check_tree_consistency(tree)
    assert res.report["cost"] == pytest.approx(-res.report["final_score"], abs=1e-9)


def test_constant_scores_only_charge_the_first_edge(arm):
    start, goals = _query(arm)
    objective = AdversarialObjective(ConstantD(0.7), length_weight=0.0)
    tree = plan(arm, PlanningProblem(start, goals, objective=objective, budget=200), keep_tree=True).tree
    first = tree.parent[1:tree.n] == 0
    np.testing.assert_allclose(tree.edge[1:tree.n][first], -0.7, atol=1e-15)
    np.testing.assert_allclose(tree.edge[1:tree.n][~first], 0.0, atol=1e-15)


def test_unit_weight_and_zero_scores_reduce_to_length(arm):
    start, goals = _query(arm)
    problem = PlanningProblem(start, goals, objective=AdversarialObjective(ConstantD(0.0), 1.0), rng_seed=4,
                              budget=300)
    adv = plan(arm, problem, keep_tree=True)
    ref = plan(arm, PlanningProblem(start, goals, rng_seed=4, budget=300))
    np.testing.assert_array_equal(adv.motion.states, ref.motion.states)
    tree = adv.tree
    dist = np.linalg.norm(tree.Q[1:tree.n] - tree.Q[tree.parent[1:tree.n]], axis=1)
    np.testing.assert_allclose(tree.edge[1:tree.n], dist, atol=1e-15)


def test_edge_cost_matches_tree_bookkeeping(arm):
    start, goals = _query(arm)
    objective = AdversarialObjective(Discriminator.initialize(3))
    tree = plan(arm, PlanningProblem(start, goals, objective=objective, budget=150), keep_tree=True).tree
    for i in range(1, 20):
        assert edge_cost(objective, tree, tree.parent[i], tree.Q[i]) == pytest.approx(tree.edge[i], abs=1e-12)
    with pytest.raises(ValueError):
        edge_cost(objective, tree, tree.n, start)


def test_frozen_and_full_agree_for_constant_scores(arm):
    start, goals = _query(arm)
    objective = AdversarialObjective(ConstantD(0.4))
    out = []
    for mode in ("full", "frozen"):
        res = plan(arm, PlanningProblem(start, goals, objective=objective, rng_seed=2, budget=300),
                   PlannerConfig(rewire_mode=mode), keep_tree=True)
        out.append(res)
    np.testing.assert_array_equal(out[0].motion.states, out[1].motion.states)
    np.testing.assert_array_equal(out[0].tree.cost, out[1].tree.cost)


def _chain_tree(arm, d):
    """Root with children a and x; a carries the chain a -> b -> c -> e."""
    tree = Tree(arm, AdversarialObjective(d, 0.0), np.zeros(7), 10)
    q = lambda v: np.full(7, v)
    a = tree.add(q(0.1), 0, 0.0, 0.0)
    x = tree.add(q(-0.1), 0, 0.0, 0.0)
    b = tree.add(q(0.2), a, 0.0, 0.0)
    c = tree.add(q(0.3), b, 0.0, 0.0)
    e = tree.add(q(0.4), c, 0.0, 0.0)
    assert rewire_propagate(tree, 0, "full") == 5
    return tree, a, x, (b, c, e)


def test_rewire_propagation_full_mode(arm):
    tree, a, x, chain = _chain_tree(arm, Discriminator.initialize(1))
    s = tree.evaluate([x], tree.markers[[a]])[0]
    tree.reparent(a, x, tree.score[x] - s, s)
    assert rewire_propagate(tree, a, "full") == 3
    n = tree.n
    np.testing.assert_allclose(tree.cost[:n], -tree.score[:n], atol=1e-9)
    np.testing.assert_allclose(tree.evaluate(np.arange(1, n)), tree.score[1:n], atol=1e-12)
    _check_tree_consistency(tree)
    assert rewire_propagate(tree, chain[-1], "full") == 0


def test_rewire_propagation_frozen_mode_shifts_offsets(arm):
    tree, a, x, chain = _chain_tree(arm, Discriminator.initialize(1))
    edges = tree.edge.copy()
    tree.reparent(a, x, 0.25, tree.score[a])
    assert rewire_propagate(tree, a, "frozen") == 0
    np.testing.assert_array_equal(tree.edge[list(chain)], edges[list(chain)])
    _check_tree_consistency(tree)


def test_start_equal_to_goal(arm):
    start, _ = _query(arm)
    res = plan(arm, PlanningProblem(start, [start.copy()]))
    assert res.motion.states.shape == (2, 7)
    np.testing.assert_array_equal(res.motion.states[0], res.motion.states[1])
    assert res.report["cost"] == 0.0 and res.report["length"] == 0.0


def test_planar_length_optimality():
    s, g = np.array([-2.0, -1.5]), np.array([2.0, 1.0])
    res = plan(planar(), PlanningProblem(s, [g], rng_seed=0, budget=3000))
    assert res.report["cost"] <= 1.05 * np.linalg.norm(g - s)
    assert res.report["cost"] >= np.linalg.norm(g - s) - 1e-12


def test_anytime_improvement_and_goal_attainment(arm):
    start, goals = _query(arm)
    res = plan(arm, PlanningProblem(start, goals, rng_seed=5, budget=600))
    costs = [c for _, c in res.trace]
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    assert any(np.array_equal(res.motion.states[-1], g) for g in goals)
    np.testing.assert_array_equal(res.motion.states[0], start)


def test_collision_soundness(arm):
    from advplan.kinematics import forward_kinematics

    start, goals = _query(arm)
    # block the straight-line hand path
    mid = forward_kinematics(arm, 0.5 * (start + goals[0]))[2]
    scene = Scene((Sphere(mid, 0.02),), 0.01)
    res = plan(arm, PlanningProblem(start, goals[:1], scene, rng_seed=1, budget=1500))
    assert not motion_in_collision(arm, res.motion.states, scene, PlannerConfig().resolution)


def test_determinism(arm):
    start, goals = _query(arm)
    objective = AdversarialObjective(Discriminator.initialize(0))
    a = plan(arm, PlanningProblem(start, goals, objective=objective, rng_seed=9, budget=200))
    b = plan(arm, PlanningProblem(start, goals, objective=objective, rng_seed=9, budget=200))
    assert a.motion.states.tobytes() == b.motion.states.tobytes()
    assert a.report == b.report


def test_adversarial_cost_bounds(arm):
    start, goals = _query(arm)
    objective = AdversarialObjective(Discriminator.initialize(6), 0.05)
    res = plan(arm, PlanningProblem(start, goals, objective=objective, budget=300))
    r = res.report
    assert -1.0 <= r["cost"] <= 0.05 * r["length"]
    assert r["cost"] == pytest.approx(0.05 * r["length"] - r["final_score"], abs=1e-9)


def test_evaluation_cap_switches_to_frozen(arm):
    start, goals = _query(arm)
    objective = AdversarialObjective(Discriminator.initialize(0), 0.0)
    res = plan(arm, PlanningProblem(start, goals, objective=objective, budget=300), PlannerConfig(eval_cap=50))
    assert res.report["rewire_mode"] == "frozen"


def test_adversarial_planner_follows_trained_discriminator(arm):
    d, _ = train(Discriminator.initialize(0), toy_motion_set(arm, 100, 0), TrainConfig())
    rng = np.random.default_rng(11)
    scores = []
    for seed in range(5):
        start = rng.uniform(-0.4, 0.4, 7)
        goal = rng.uniform(-0.4, 0.4, 7)
        start[1], goal[1] = 0.6, 0.6
        res = plan(arm, PlanningProblem(start, [goal], objective=AdversarialObjective(d), rng_seed=seed,
                                        budget=400))
        scores.append(res.report["final_score"])
        assert res.report["final_score"] == pytest.approx(d.score(encode(arm, res.motion)), abs=1e-12)
    assert np.mean(np.array(scores) >= 0.8) >= 0.8


@pytest.mark.parametrize("mutate, message", [
    (lambda s, g: (s, []), "empty"),
    (lambda s, g: (s, [np.full(7, 3.0)]), "limits"),
    (lambda s, g: (np.full(7, -3.0), g), "limits"),
])
def test_invalid_problems(arm, mutate, message):
    start, goals = mutate(*_query(arm))
    with pytest.raises(PlanningError, match=message):
        plan(arm, PlanningProblem(start, goals))


def test_start_or_goals_in_collision(arm):
    start, goals = _query(arm)
    blocker = Scene((Sphere((0.0, 0.0, 0.0), 0.05),))
    with pytest.raises(PlanningError, match="start"):
        plan(arm, PlanningProblem(start, goals, blocker))
    from advplan.kinematics import forward_kinematics

    hand = forward_kinematics(arm, goals[0])[2]
    other = forward_kinematics(arm, goals[1])[2]
    scene = Scene((Sphere(hand, 0.02), Sphere(other, 0.02)))
    with pytest.raises(PlanningError, match="goal"):
        plan(arm, PlanningProblem(start, goals, scene))


def test_failure_when_budget_is_exhausted(arm):
    start, goals = _query(arm)
    with pytest.raises(PlanningFailure):
        plan(arm, PlanningProblem(start, goals, budget=3))


def test_planner_config_validation():
    with pytest.raises(ValueError):
        PlannerConfig(rewire_mode="lazy")
    with pytest.raises(ValueError):
        PlannerConfig(step_max=0.0)
    assert PlannerConfig.from_dict(PlannerConfig().to_dict()) == PlannerConfig()
    assert LengthObjective().length_weight == 1.0
