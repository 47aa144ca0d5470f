"""Joint-space RRT* with a pluggable, possibly history-dependent edge cost.

Sign convention for the adversarial objective: the edge cost into a node
is ``w * |dq| + score(parent) - score(child)`` where ``score`` is the
discriminator output on the root-to-node prefix (the root scores 0). The
costs telescope, so a path's cumulative cost is ``w * length - score(end)``
and minimising it maximises how real the finished motion looks. Edge
costs can be negative.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .collision import DEFAULT_RESOLUTION, Scene, edge_in_collision, markers_in_collision
from .kinematics import forward_kinematics_batch
from .motion_repr import Motion

log = logging.getLogger(__name__)

DEFAULT_LENGTH_WEIGHT = 0.05


class PlanningError(Exception):
    """Invalid planning problem (start or goals unusable)."""


class PlanningFailure(Exception):
    """No goal was connected within the node budget."""


@dataclass(frozen=True)
class LengthObjective:
    length_weight: float = 1.0
    uses_scores = False


@dataclass(frozen=True)
class AdversarialObjective:
    discriminator: object
    length_weight: float = DEFAULT_LENGTH_WEIGHT
    uses_scores = True


@dataclass(frozen=True)
class PlannerConfig:
    step_max: float = 0.15
    goal_bias: float = 0.05
    gamma: float | None = None
    resolution: float = DEFAULT_RESOLUTION
    rewire_mode: str = "full"
    eval_cap: int = 200_000
    max_iterations_factor: int = 10

    def __post_init__(self):
        if self.rewire_mode not in ("full", "frozen"):
            raise ValueError(f"unknown rewire mode {self.rewire_mode!r}")
        if self.step_max <= 0 or self.resolution <= 0:
            raise ValueError("step_max and resolution must be positive")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal_bias must lie in [0, 1]")

    @classmethod
    def from_dict(cls, doc):
        return cls(**(doc or {}))

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class PlanningProblem:
    start: np.ndarray
    goals: list
    scene: Scene = field(default_factory=Scene)
    objective: object = field(default_factory=LengthObjective)
    rng_seed: int = 0
    budget: int = 2000


def rrt_star_gamma(lower, upper):
    """Lower bound on the RRT* neighbourhood constant for a box-shaped space."""
    d = len(lower)
    volume = float(np.prod(np.asarray(upper) - np.asarray(lower)))
    unit_ball = math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)
    return 2.0 * (1.0 + 1.0 / d) ** (1.0 / d) * (volume / unit_ball) ** (1.0 / d)


class Tree:
    """Array-backed search tree. Node 0 is the root."""

    def __init__(self, chain, objective, root, capacity):
        self.chain = chain
        self.objective = objective
        d = chain.dof
        cap = max(int(capacity), 1)
        self.Q = np.empty((cap, d))
        self.markers = np.empty((cap, 3, 3))
        self.parent = np.full(cap, -1, dtype=np.intp)
        self.cost = np.zeros(cap)
        self.edge = np.zeros(cap)
        self.score = np.zeros(cap)
        self.children = []
        self.n = 0
        self.evaluations = 0
        self._score = objective.discriminator.scorer() if objective.uses_scores else None
        self.add(np.asarray(root, dtype=np.float64), -1, 0.0, 0.0)

    @property
    def capacity(self):
        return len(self.parent)

    def add(self, q, parent, edge, score, markers=None):
        i = self.n
        if i >= self.capacity:
            raise IndexError("tree is full")
        self.Q[i] = q
        self.markers[i] = forward_kinematics_batch(self.chain, q[None])[0] if markers is None else markers
        self.parent[i] = parent
        self.edge[i] = edge
        self.score[i] = score
        self.cost[i] = 0.0 if parent < 0 else self.cost[parent] + edge
        self.children.append([])
        if parent >= 0:
            self.children[parent].append(i)
        self.n += 1
        return i

    def path(self, node):
        out = []
        while node >= 0:
            out.append(int(node))
            node = self.parent[node]
        out.reverse()
        return out

    def ancestors(self, node):
        out = set()
        node = self.parent[node]
        while node >= 0:
            out.add(int(node))
            node = self.parent[node]
        return out

    def descendants(self, node):
        out = []
        queue = deque(self.children[node])
        while queue:
            c = queue.popleft()
            out.append(c)
            queue.extend(self.children[c])
        return out

    def evaluate(self, node_ids, extra=None):
        """Discriminator scores of the root-to-node prefixes (optionally extended by ``extra`` frames)."""
        node_ids = np.asarray(node_ids, dtype=np.intp)
        if len(node_ids) == 0:
            return np.zeros(0)
        X = kernels.encode_paths(self.markers[: self.n], self.parent[: self.n], node_ids, extra)
        self.evaluations += len(node_ids)
        return self._score(X)

    def reparent(self, node, new_parent, edge, score):
        old = self.parent[node]
        self.children[old].remove(node)
        self.children[new_parent].append(node)
        self.parent[node] = new_parent
        self.edge[node] = edge
        self.score[node] = score
        self.cost[node] = self.cost[new_parent] + edge


def edge_cost(objective, tree, parent, child_state, child_markers=None):
    """Cost of appending ``child_state`` to the tree path ending at ``parent``."""
    if parent < 0 or parent >= tree.n:
        raise ValueError("parent must be a node of the tree")
    child_state = np.asarray(child_state, dtype=np.float64)
    length = float(np.linalg.norm(child_state - tree.Q[parent]))
    if not objective.uses_scores:
        return objective.length_weight * length
    if child_markers is None:
        child_markers = forward_kinematics_batch(tree.chain, child_state[None])[0]
    s = tree.evaluate([parent], child_markers[None])[0]
    return objective.length_weight * length + tree.score[parent] - s


def rewire_propagate(tree, node, mode="full"):
    """Refresh costs below ``node`` after it changed parent.

    ``full`` re-scores every descendant on its new prefix (breadth first);
    ``frozen`` keeps cached edge costs and only shifts cost-to-come.
    Returns the number of discriminator evaluations spent.
    """
    spent = 0
    level = list(tree.children[node])
    objective = tree.objective
    while level:
        if mode == "full" and objective.uses_scores:
            scores = tree.evaluate(level)
            spent += len(level)
            for c, s in zip(level, scores):
                p = tree.parent[c]
                length = float(np.linalg.norm(tree.Q[c] - tree.Q[p]))
                tree.edge[c] = objective.length_weight * length + tree.score[p] - s
                tree.score[c] = s
                tree.cost[c] = tree.cost[p] + tree.edge[c]
        else:
            for c in level:
                tree.cost[c] = tree.cost[tree.parent[c]] + tree.edge[c]
        level = [g for c in level for g in tree.children[c]]
    return spent


def _validate(chain, problem, config):
    start = chain.check_state(problem.start)
    if len(problem.goals) == 0:
        raise PlanningError("goal list is empty")
    goals = [chain.check_state(g) for g in problem.goals]
    if not chain.within_limits(start, 1e-12):
        raise PlanningError("start state violates joint limits")
    for i, g in enumerate(goals):
        if not chain.within_limits(g, 1e-12):
            raise PlanningError(f"goal {i} violates joint limits")
    scene = problem.scene
    if not scene.empty:
        if markers_in_collision(forward_kinematics_batch(chain, start[None]), scene)[0]:
            raise PlanningError("start state is in collision")
        free = ~markers_in_collision(forward_kinematics_batch(chain, np.stack(goals)), scene)
        if not free.any():
            raise PlanningError("all goal states are in collision")
        goals = [g for g, ok in zip(goals, free) if ok]
    return start, goals


@dataclass
class PlanResult:
    motion: Motion
    report: dict
    tree: Tree | None = None
    trace: list = field(default_factory=list)


def plan(chain, problem, config=None, keep_tree=False):
    """Plan from ``problem.start`` to the cheapest reachable goal state.

    Raises :class:`PlanningError` for invalid problems and
    :class:`PlanningFailure` when no goal connects within the budget.
    """
    config = config or PlannerConfig()
    start, goals = _validate(chain, problem, config)
    objective = problem.objective
    scene = problem.scene
    budget = max(int(problem.budget), 2)
    tree = Tree(chain, objective, start, budget)
    d = chain.dof
    lower, upper = chain.lower, chain.upper
    gamma = config.gamma if config.gamma is not None else rrt_star_gamma(lower, upper)
    rng = np.random.default_rng(problem.rng_seed)
    w = objective.length_weight
    mode = config.rewire_mode
    goal_node = {}
    G = np.stack(goals)
    trace = []
    best = (math.inf, -1)

    def try_connect(q_new, markers_new):
        """Insert ``q_new`` with the cheapest collision-free parent; returns its index or -1."""
        n = tree.n
        diff = tree.Q[:n] - q_new
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        radius = config.step_max * 4.0
        if n > 1:
            radius = min(radius, gamma * (math.log(n) / n) ** (1.0 / d))
        near = np.flatnonzero(dist <= radius)
        nearest = int(np.argmin(dist))
        if nearest not in near:
            near = np.append(near, nearest)
        near = near[dist[near] <= max(radius, dist[nearest])]
        if objective.uses_scores:
            scores = tree.evaluate(near, np.broadcast_to(markers_new, (len(near), 3, 3)))
            edges = w * dist[near] + tree.score[near] - scores
        else:
            scores = np.zeros(len(near))
            edges = w * dist[near]
        totals = tree.cost[near] + edges
        for j in np.argsort(totals, kind="stable"):
            p = int(near[j])
            if scene.empty or not edge_in_collision(chain, tree.Q[p], q_new, scene, config.resolution):
                break
        else:
            return -1, near, dist
        new = tree.add(q_new, p, float(edges[j]), float(scores[j]), markers_new)
        return new, near, dist

    def rewire(new, near, dist):
        nonlocal mode
        ancestors = tree.ancestors(new)
        cands = np.array([p for p in near if p != tree.parent[new] and p not in ancestors and p != new],
                         dtype=np.intp)
        if len(cands) == 0:
            return
        if objective.uses_scores:
            scores = tree.evaluate(np.full(len(cands), new), tree.markers[cands])
            edges = w * dist[cands] + tree.score[new] - scores
        else:
            scores = tree.score[cands]
            edges = w * dist[cands]
        for p, e, s in zip(cands, edges, scores):
            p = int(p)
            if tree.cost[new] + e >= tree.cost[p] - 1e-12:
                continue
            if not scene.empty and edge_in_collision(chain, tree.Q[new], tree.Q[p], scene, config.resolution):
                continue
            tree.reparent(p, new, float(e), float(s))
            if mode == "full" and tree.evaluations >= config.eval_cap:
                log.debug("evaluation cap reached; switching to frozen rewiring")
                mode = "frozen"
            rewire_propagate(tree, p, mode)

    def note_goal(gi, node):
        goal_node[gi] = node

    def update_best():
        nonlocal best
        if goal_node:
            node = min(goal_node.values(), key=lambda i: (tree.cost[i], i))
            if (tree.cost[node], node) != best:
                best = (float(tree.cost[node]), node)
                trace.append((tree.n, best[0]))

    # a goal identical to the start is accepted immediately
    for gi, g in enumerate(goals):
        if np.array_equal(g, start):
            markers_g = tree.markers[0]
            new, _, _ = try_connect(g.copy(), markers_g)
            note_goal(gi, new)
            update_best()
            return _finish(tree, chain, goal_node, problem, trace, keep_tree, mode)

    max_iter = config.max_iterations_factor * budget
    it = 0
    while tree.n < budget and it < max_iter:
        it += 1
        open_goals = [gi for gi in range(len(goals)) if gi not in goal_node]
        target_goal = -1
        if open_goals and rng.random() < config.goal_bias:
            target_goal = open_goals[int(rng.integers(len(open_goals)))]
            sample = G[target_goal]
        else:
            sample = rng.uniform(lower, upper)
        diff = tree.Q[: tree.n] - sample
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        nearest = int(np.argmin(dist))
        dn = float(dist[nearest])
        if dn == 0.0:
            continue
        if dn <= config.step_max:
            q_new = sample.copy()
        else:
            q_new = tree.Q[nearest] + (sample - tree.Q[nearest]) * (config.step_max / dn)
            target_goal = -1
        markers_new = forward_kinematics_batch(chain, q_new[None])[0]
        if not scene.empty and markers_in_collision(markers_new[None], scene)[0]:
            continue
        new, near, ndist = try_connect(q_new, markers_new)
        if new < 0:
            continue
        if target_goal >= 0:
            note_goal(target_goal, new)
        rewire(new, near, ndist)
        # open goals within one step of the new node are connected like ordinary states
        if tree.n < budget:
            for gi in [gi for gi in range(len(goals)) if gi not in goal_node]:
                if tree.n >= budget:
                    break
                if np.linalg.norm(G[gi] - q_new) <= config.step_max:
                    mg = forward_kinematics_batch(chain, G[gi][None])[0]
                    gnode, gnear, gdist = try_connect(G[gi].copy(), mg)
                    if gnode >= 0:
                        note_goal(gi, gnode)
                        rewire(gnode, gnear, gdist)
        update_best()
    update_best()
    if not goal_node:
        raise PlanningFailure(f"no goal connected within {budget} nodes ({it} iterations)")
    return _finish(tree, chain, goal_node, problem, trace, keep_tree, mode, iterations=it)


def _finish(tree, chain, goal_node, problem, trace, keep_tree, mode, iterations=0):
    node = min(goal_node.values(), key=lambda i: (tree.cost[i], i))
    path = tree.path(node)
    states = tree.Q[path].copy()
    if len(states) == 1:
        states = np.stack((states[0], states[0]))
    length = float(np.sum(np.linalg.norm(np.diff(states, axis=0), axis=1)))
    objective = problem.objective
    report = {
        "cost": float(tree.cost[node]),
        "final_score": float(tree.score[node]) if objective.uses_scores else None,
        "length": length,
        "node_count": int(tree.n),
        "iterations": int(iterations),
        "evaluations": int(tree.evaluations),
        "rewire_mode": mode,
        "goals_connected": len(goal_node),
        "seed": int(problem.rng_seed),
    }
    motion = Motion(states, "robot", meta={"report": report})
    return PlanResult(motion, report, tree if keep_tree else None, list(trace))
