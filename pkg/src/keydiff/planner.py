"""Batched neural planning: sample K windows, stitch, check, replan from the end."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .arm import ArmSpec, CollisionChecker, densify
from .diffusion.model import DiffusionModel, sample_actions
from .plans import KEYPOINT, Plan, arc_length, dedupe
from .scene import Scene

SUCCESS = "Success"
NO_PLAN_WITHIN_ROUNDS = "NoPlanWithinRounds"
ALL_COLLIDE = "AllCollide"


class WindowModel(Protocol):
    """Anything that proposes ``(len(rows), horizon, D)`` joint-space windows."""

    def propose(self, starts: np.ndarray, goal: np.ndarray, seed: int, rows: Sequence[int]) -> np.ndarray: ...


@dataclass
class PlanRequest:
    scene: Scene
    start: np.ndarray
    goal: np.ndarray
    K: int = 32
    goal_tol: float = 0.05
    max_rounds: int = 4
    interp_step: float = 0.05
    collision_resolution: float = 0.01

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        if self.K < 1 or self.max_rounds < 1:
            raise ValueError("K and max_rounds must be >= 1")
        if min(self.goal_tol, self.interp_step, self.collision_resolution) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class Candidate:
    round: int
    index: int
    collision_free: bool
    reached_goal: bool
    arc_length: float


@dataclass
class PlanResult:
    status: str
    best_plan: Plan | None
    candidates: list[Candidate]
    inference_s: float
    collision_s: float
    total_s: float
    rounds_used: int
    K: int
    reason: str = ""
    # per-candidate running plans (kept for plan dumps)
    paths: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    path_round: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def success(self) -> bool:
        return self.status == SUCCESS

    def round_candidates(self, r: int) -> list[Candidate]:
        return [c for c in self.candidates if c.round == r]


def in_batch_success_rate(result: PlanResult) -> float:
    """Fraction of the K first-round candidates that are collision-free and reach the goal."""
    first = result.round_candidates(1)
    return sum(c.collision_free and c.reached_goal for c in first) / result.K


# ---------------------------------------------------------------------------
# window models


class DiffusionWindowModel:
    """Adapts a trained denoiser (plus an optional scene embedding) to ``WindowModel``."""

    def __init__(self, model: DiffusionModel, embedding: np.ndarray | None = None, init: str = "gaussian"):
        if model.uses_cloud and embedding is None:
            raise ValueError("model was trained with point-cloud conditioning; pass the scene embedding")
        self.model = model
        self.embedding = embedding
        self.init = init
        self.horizon = model.spec.horizon

    def propose(self, starts, goal, seed, rows):
        m = self.model
        cond = np.stack([m.condition(s, goal, self.embedding) for s in starts])
        x = sample_actions(m, cond, len(rows), seed, init=self.init, rows=rows)
        return m.normalizer.denormalize(x.astype(np.float64))


class StraightLineStub:
    """Emits the straight start→goal line sampled at ``horizon`` points."""

    def __init__(self, horizon: int = 16):
        self.horizon = horizon

    def propose(self, starts, goal, seed, rows):
        s = (np.arange(1, self.horizon + 1) / self.horizon)[None, :, None]
        return starts[:, None, :] + s * (goal - starts)[:, None, :]


class MidpointStub:
    """Moves halfway to the goal and pads the window with that midpoint."""

    def __init__(self, horizon: int = 16):
        self.horizon = horizon

    def propose(self, starts, goal, seed, rows):
        mid = 0.5 * (starts + goal)
        return np.repeat(mid[:, None, :], self.horizon, axis=1)


# ---------------------------------------------------------------------------


def _round_seed(seed: int, r: int) -> int:
    return int(np.random.SeedSequence([int(seed), r]).generate_state(1)[0])


def plan_batched(
    model: WindowModel,
    request: PlanRequest,
    spec: ArmSpec,
    seed: int = 0,
    checker: CollisionChecker | None = None,
) -> PlanResult:
    """Sample ``K`` candidates per round; succeed with the shortest collision-free one reaching the goal.

    Windows are treated as waypoints: each is prefixed with the candidate's current
    configuration, de-duplicated and linearly interpolated at ``interp_step``.
    Candidates that collide are dropped; the rest continue from their last
    configuration in the next round.
    """
    t_total = time.perf_counter()
    checker = checker or CollisionChecker(spec, request.scene)
    K, tol = request.K, request.goal_tol
    inference = collision = 0.0
    cands: list[Candidate] = []
    start, goal = request.start, request.goal

    if np.max(np.abs(start - goal)) <= tol:
        plan = Plan(start[None], KEYPOINT)
        cands = [Candidate(1, k, True, True, 0.0) for k in range(K)]
        return PlanResult(SUCCESS, plan, cands, 0.0, 0.0, time.perf_counter() - t_total, 1, K, paths={0: start[None]},
                          path_round={0: np.ones(1, dtype=np.int64)})

    paths = {k: start[None].copy() for k in range(K)}
    path_round = {k: np.zeros(1, dtype=np.int64) for k in range(K)}
    alive = list(range(K))
    winners: list[int] = []
    rounds = 0
    for r in range(1, request.max_rounds + 1):
        rounds = r
        t0 = time.perf_counter()
        starts = np.stack([paths[k][-1] for k in alive])
        windows = model.propose(starts, goal, _round_seed(seed, r), alive)
        inference += time.perf_counter() - t0

        t0 = time.perf_counter()
        survivors = []
        for k, w in zip(alive, windows):
            seg = densify(dedupe(np.concatenate([paths[k][-1:], w])), request.interp_step)
            free = checker.first_bad_edge(seg, request.collision_resolution) < 0
            if len(seg) > 1:
                paths[k] = np.concatenate([paths[k], seg[1:]])
                path_round[k] = np.concatenate([path_round[k], np.full(len(seg) - 1, r)])
            reached = free and bool(np.max(np.abs(paths[k][-1] - goal)) <= tol)
            cands.append(Candidate(r, k, free, reached, arc_length(paths[k])))
            if reached:
                winners.append(k)
            elif free:
                survivors.append(k)
        collision += time.perf_counter() - t0
        if winners or not survivors:
            break
        alive = survivors

    if winners:
        best = min(winners, key=lambda k: (arc_length(paths[k]), k))
        plan = Plan(dedupe(paths[best]), KEYPOINT)
        status, reason = SUCCESS, ""
    else:
        plan = None
        status = ALL_COLLIDE if not any(c.collision_free for c in cands if c.round == rounds) else NO_PLAN_WITHIN_ROUNDS
        reason = status
    return PlanResult(
        status, plan, cands, inference, collision, time.perf_counter() - t_total, rounds, K, reason, paths, path_round
    )


def write_candidate_csv(path, result: PlanResult, checker: CollisionChecker | None = None) -> None:
    """One row per configuration of each candidate's running plan (round 0 is the start)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        D = next(iter(result.paths.values())).shape[1] if result.paths else 0
        w.writerow(["candidate", "round", "step", *[f"q_{i + 1}" for i in range(D)], "collision_flag"])
        for k in sorted(result.paths):
            q = result.paths[k]
            rounds = result.path_round.get(k, np.zeros(len(q), dtype=np.int64))
            for i, row in enumerate(q):
                flag = "" if checker is None else int(not checker.config_valid(row))
                w.writerow([k, int(rounds[i]), i, *(f"{v:.6f}" for v in row), flag])
