"""Ground-truth planner: bidirectional RRT-Connect followed by shortcut smoothing."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .arm import ArmSpec, CollisionChecker
from .plans import Plan, RAW, arc_length, dedupe
from .scene import Scene


class NoPlanFound(RuntimeError):
    pass


@dataclass
class PlannerBudget:
    wall_clock_seconds: float = 5.0
    max_iterations: int = 200_000

    def __post_init__(self):
        finite = [b for b in (self.wall_clock_seconds, self.max_iterations) if b is not None and math.isfinite(b)]
        if not finite or min(finite) <= 0:
            raise ValueError("budget needs at least one finite positive bound")


@dataclass
class OracleParams:
    step: float = 0.1
    goal_bias: float = 0.1
    resolution: float = 0.01
    shortcut_rounds: int = 200


class _Tree:
    def __init__(self, root: np.ndarray, cap: int = 1024):
        self.q = np.empty((cap, len(root)))
        self.parent = np.empty(cap, dtype=np.int64)
        self.q[0] = root
        self.parent[0] = -1
        self.n = 1

    def add(self, q: np.ndarray, parent: int) -> int:
        if self.n == len(self.q):
            self.q = np.concatenate([self.q, np.empty_like(self.q)])
            self.parent = np.concatenate([self.parent, np.empty_like(self.parent)])
        self.q[self.n] = q
        self.parent[self.n] = parent
        self.n += 1
        return self.n - 1

    def nearest(self, q: np.ndarray) -> int:
        d = self.q[: self.n] - q
        return int(np.argmin(np.einsum("ij,ij->i", d, d)))

    def path_to_root(self, i: int) -> list[np.ndarray]:
        out = []
        while i >= 0:
            out.append(self.q[i])
            i = self.parent[i]
        return out


_TRAPPED, _ADVANCED, _REACHED = 0, 1, 2


def _extend(tree: _Tree, target: np.ndarray, checker: CollisionChecker, step: float, res: float):
    i = tree.nearest(target)
    qn = tree.q[i]
    d = target - qn
    dist = float(np.linalg.norm(d))
    if dist <= step:
        q_new, status = target.copy(), _REACHED
    else:
        q_new, status = qn + d * (step / dist), _ADVANCED
    if not checker.edge_valid(qn, q_new, res):
        return _TRAPPED, -1
    return status, tree.add(q_new, i)


def _connect(tree: _Tree, target: np.ndarray, checker, step, res):
    while True:
        status, j = _extend(tree, target, checker, step, res)
        if status != _ADVANCED:
            return status, j


def plan_oracle(
    spec: ArmSpec,
    scene: Scene,
    start,
    goal,
    budget: PlannerBudget | None = None,
    rng: np.random.Generator | None = None,
    params: OracleParams | None = None,
    scene_id: int = -1,
    checker: CollisionChecker | None = None,
) -> Plan:
    budget = budget or PlannerBudget()
    params = params or OracleParams()
    rng = rng or np.random.default_rng()
    checker = checker or CollisionChecker(spec, scene)
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if not checker.config_valid(start) or not checker.config_valid(goal):
        raise ValueError("start and goal must be valid configurations")
    if np.array_equal(start, goal):
        return Plan(start[None], RAW, scene_id)

    deadline = time.perf_counter() + (budget.wall_clock_seconds if budget.wall_clock_seconds else math.inf)
    max_iter = budget.max_iterations or math.inf
    res, step = params.resolution, params.step

    path = None
    if checker.edge_valid(start, goal, res):
        path = np.stack([start, goal])
    else:
        ta, tb = _Tree(start), _Tree(goal)
        a_is_start = True
        it = 0
        while path is None:
            it += 1
            if it > max_iter or time.perf_counter() > deadline:
                raise NoPlanFound(f"no connection after {it - 1} iterations")
            if rng.random() < params.goal_bias:
                q_rand = tb.q[0].copy()
            else:
                q_rand = rng.uniform(spec.lo, spec.hi)
            status, ia = _extend(ta, q_rand, checker, step, res)
            if status != _TRAPPED:
                status_b, ib = _connect(tb, ta.q[ia], checker, step, res)
                if status_b == _REACHED:
                    pa = ta.path_to_root(ia)[::-1]
                    pb = tb.path_to_root(ib)[1:]
                    seq = pa + pb
                    if not a_is_start:
                        seq = seq[::-1]
                    path = np.array(seq)
            ta, tb = tb, ta
            a_is_start = not a_is_start

    plan = Plan(dedupe(path), RAW, scene_id)
    smooth = shortcut_smooth(spec, scene, plan, params.shortcut_rounds, rng, res, checker=checker)
    for candidate in (smooth, plan):
        if all(checker.edge_valid(a, b, res) for a, b in zip(candidate.configs[:-1], candidate.configs[1:])):
            return candidate
    raise NoPlanFound("planner output failed re-validation")


def _point_at(configs: np.ndarray, cum: np.ndarray, s: float) -> tuple[int, np.ndarray]:
    i = int(np.searchsorted(cum, s, side="right") - 1)
    i = min(max(i, 0), len(configs) - 2)
    seg = cum[i + 1] - cum[i]
    t = 0.0 if seg == 0 else (s - cum[i]) / seg
    return i, configs[i] + t * (configs[i + 1] - configs[i])


def _prune(q: np.ndarray, checker: CollisionChecker, resolution: float) -> np.ndarray:
    """Greedy pass: from each kept vertex jump to the farthest vertex reachable by a valid edge."""
    if len(q) < 3:
        return q
    keep = [0]
    i = 0
    while i < len(q) - 1:
        j = len(q) - 1
        while j > i + 1 and not checker.edge_valid(q[i], q[j], resolution):
            j -= 1
        keep.append(j)
        i = j
    return q[keep]


def shortcut_smooth(
    spec: ArmSpec,
    scene: Scene,
    plan: Plan,
    rounds: int = 200,
    rng: np.random.Generator | None = None,
    resolution: float = 0.01,
    checker: CollisionChecker | None = None,
) -> Plan:
    """Randomised shortcutting: replace the path between two random arc positions by a straight edge."""
    rng = rng or np.random.default_rng()
    checker = checker or CollisionChecker(spec, scene)
    q = _prune(dedupe(plan.configs), checker, resolution)
    for _ in range(rounds):
        if len(q) < 3:
            break
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(q, axis=0), axis=1))])
        s1, s2 = np.sort(rng.uniform(0.0, cum[-1], size=2))
        i, p1 = _point_at(q, cum, s1)
        j, p2 = _point_at(q, cum, s2)
        if j <= i:
            continue
        old = np.linalg.norm(p1 - q[i + 1]) + (cum[j] - cum[i + 1]) + np.linalg.norm(q[j] - p2)
        if np.linalg.norm(p2 - p1) >= old - 1e-12:
            continue
        # the partial edges onto p1 / from p2 sample different configurations than
        # the edges they were cut from, so they are checked too
        if (
            checker.edge_valid(p1, p2, resolution)
            and checker.edge_valid(q[i], p1, resolution)
            and checker.edge_valid(p2, q[j + 1], resolution)
        ):
            q = dedupe(np.concatenate([q[: i + 1], p1[None], p2[None], q[j + 1 :]]))
    q = _prune(q, checker, resolution)
    # drop vertices that lie on a straight line through their neighbours
    if len(q) > 2:
        keep = [0]
        for k in range(1, len(q) - 1):
            a, b, c = q[keep[-1]], q[k], q[k + 1]
            collinear = abs(np.linalg.norm(c - a) - (np.linalg.norm(b - a) + np.linalg.norm(c - b))) <= 1e-12
            if not (collinear and checker.edge_valid(a, c, resolution)):
                keep.append(k)
        keep.append(len(q) - 1)
        q = q[keep]
    return plan.with_configs(q, plan.representation)
