"""Plan container and the fixed-step / keypoint representations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq, least_squares

RAW, FIXED_STEP, KEYPOINT = "raw", "fixed_step", "keypoint"
REPRESENTATIONS = (RAW, FIXED_STEP, KEYPOINT)


def arc_length(configs: np.ndarray, metric: str = "l2") -> float:
    """Joint-space path length; ``l1`` sums absolute per-joint motion instead."""
    configs = np.asarray(configs, dtype=float)
    if len(configs) < 2:
        return 0.0
    d = np.diff(configs, axis=0)
    if metric == "l2":
        return float(np.linalg.norm(d, axis=1).sum())
    if metric == "l1":
        return float(np.abs(d).sum())
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class Plan:
    configs: np.ndarray
    representation: str = RAW
    scene_id: int = -1

    def __post_init__(self):
        self.configs = np.atleast_2d(np.asarray(self.configs, dtype=float))
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")

    def __len__(self) -> int:
        return len(self.configs)

    @property
    def start(self) -> np.ndarray:
        return self.configs[0]

    @property
    def goal(self) -> np.ndarray:
        return self.configs[-1]

    @property
    def arc_length(self) -> float:
        return arc_length(self.configs)

    def with_configs(self, configs, representation: str | None = None) -> "Plan":
        return Plan(configs, representation or self.representation, self.scene_id)


def dedupe(configs: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Drop consecutive duplicates (within ``tol`` L2)."""
    configs = np.asarray(configs, dtype=float)
    if len(configs) < 2:
        return configs
    keep = [0]
    for i in range(1, len(configs)):
        if np.linalg.norm(configs[i] - configs[keep[-1]]) > tol:
            keep.append(i)
    out = configs[keep]
    if len(out) > 1 and keep[-1] != len(configs) - 1:
        out[-1] = configs[-1]
    return out


# ---------------------------------------------------------------------------
# keypoints


def second_difference_norms(configs: np.ndarray, norm: str = "linf") -> np.ndarray:
    """Norm of q[i+1] - 2 q[i] + q[i-1] for interior indices 1..n-2."""
    configs = np.asarray(configs, dtype=float)
    dd = configs[2:] - 2.0 * configs[1:-1] + configs[:-2]
    if norm == "linf":
        return np.abs(dd).max(axis=1) if len(dd) else np.zeros(0)
    if norm == "l2":
        return np.linalg.norm(dd, axis=1)
    raise ValueError(f"unknown norm {norm!r}")


def extract_keypoints(plan: Plan, eps: float, norm: str = "linf") -> Plan:
    """Keep endpoints plus interior configs whose second difference exceeds ``eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if plan.representation == KEYPOINT:
        raise ValueError("plan is already a keypoint plan")
    if len(plan) < 2:
        return plan.with_configs(plan.configs.copy())
    acc = second_difference_norms(plan.configs, norm)
    keep = np.concatenate([[True], acc > eps, [True]])
    return plan.with_configs(plan.configs[keep], KEYPOINT)


def keypoint_count(plan: Plan, eps: float, norm: str = "linf") -> int:
    if len(plan) < 2:
        return len(plan)
    return int(2 + np.count_nonzero(second_difference_norms(plan.configs, norm) > eps))


# ---------------------------------------------------------------------------
# fixed step


def _next_on_polyline(poly: np.ndarray, seg: int, tau: float, p: np.ndarray, s: float):
    """First point after (seg, tau) on the polyline at distance ``s`` from ``p``."""
    for i in range(seg, len(poly) - 1):
        a = poly[i]
        u = poly[i + 1] - a
        t0 = tau if i == seg else 0.0
        uu = float(u @ u)
        if uu == 0.0:
            continue
        w = a - p
        bq = float(w @ u)
        cq = float(w @ w) - s * s
        disc = bq * bq - uu * cq
        if disc < 0:
            continue
        r = (-bq + math.sqrt(disc)) / uu
        if t0 <= r <= 1.0:
            return i, r, a + r * u
    return None


def _walk(poly: np.ndarray, s: float, n: int):
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(poly, axis=0), axis=1))])
    seg_len = np.diff(cum)
    pts = [poly[0]]
    seg, tau, p = 0, 0.0, poly[0]
    for k in range(n):
        hit = _next_on_polyline(poly, seg, tau, p, s)
        if hit is None:
            # the rest of the path stays within s of p; this residual is negative and
            # tends to 0 as the last chord lands on the end point, like the full-walk one
            return pts, float(np.linalg.norm(poly[-1] - p)) - (n - k) * s
        seg, tau, p = hit
        pts.append(p)
    return pts, cum[-1] - (cum[seg] + tau * seg_len[seg])


def resample_fixed_step(plan: Plan, step: float) -> Plan:
    """Resample the polyline so consecutive configurations are equally spaced (L2 chord) and <= ``step``."""
    if step <= 0:
        raise ValueError("step must be positive")
    poly = dedupe(plan.configs)
    L = arc_length(poly)
    if len(poly) < 2 or L == 0.0:
        return plan.with_configs(poly, FIXED_STEP)
    n0 = n = max(1, math.ceil(L / step - 1e-12))
    while n <= 4 * n0 + 16:
        if n == 1:
            return plan.with_configs(np.stack([poly[0], poly[-1]]), FIXED_STEP)
        out = _equal_chords(poly, L, n)
        if out is None:
            out = _joint_chords(poly, n)
        if out is not None:
            return plan.with_configs(out, FIXED_STEP)
        n += 1
    raise RuntimeError(f"no equal-chord resampling found for a plan of length {L:.4f}")


def _equal_chords(poly: np.ndarray, L: float, n: int) -> np.ndarray | None:
    """n equal chords from start to end, or None when no root of the walk residual is found."""
    hi = L / n
    _, r_hi = _walk(poly, hi, n)
    # chords never exceed the arc they span, so r_hi <= 0 up to rounding
    if r_hi >= -1e-12 * max(L, 1.0):
        return _accept(poly, hi, n)
    lo = hi * 0.5
    while _walk(poly, lo, n)[1] <= 0 and lo > 1e-9 * hi:
        lo *= 0.5
    f = lambda v: _walk(poly, v, n)[1]  # noqa: E731
    brackets = [(lo, hi)]
    # the residual jumps where a chord sphere grazes a sharp turn; if the first root
    # found is such a jump, try the other sign changes on a grid
    grid = np.linspace(lo, hi, 257)
    for attempt in range(2):
        for a, b in brackets:
            if f(a) * f(b) > 0:
                continue
            out = _accept(poly, brentq(f, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500), n)
            if out is not None:
                return out
        if attempt == 0:
            vals = np.array([f(v) for v in grid])
            idx = np.flatnonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))
            brackets = [(grid[i], grid[i + 1]) for i in idx[::-1]]
    return None


def _joint_chords(poly: np.ndarray, n: int, tol: float = 1e-10) -> np.ndarray | None:
    """Solve for all n-1 interior arc parameters and the chord length at once.

    The sequential walk takes the first sphere crossing at each step, which can skip the
    only solutions near a short segment after a sharp turn; here every chord is matched
    jointly, starting from equal arc spacing.
    """
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(poly, axis=0), axis=1))])
    L = cum[-1]
    keep = np.flatnonzero(np.diff(cum) > 0)
    units = (poly[keep + 1] - poly[keep]) / np.diff(cum)[keep, None]

    def at(t):
        i = np.clip(np.searchsorted(cum[keep], t, side="right") - 1, 0, len(keep) - 1)
        return poly[keep[i]] + (t - cum[keep[i]])[:, None] * units[i], units[i]

    def full(x):
        return np.concatenate([[0.0], np.clip(x[:-1], 0.0, L), [L]])

    def resid(x):
        pts, _ = at(full(x))
        return np.linalg.norm(np.diff(pts, axis=0), axis=1) - x[-1]

    def jac(x):
        pts, tan = at(full(x))
        ch = np.diff(pts, axis=0)
        nrm = np.maximum(np.linalg.norm(ch, axis=1), 1e-300)
        J = np.zeros((n, n))
        for k in range(n):
            if k < n - 1:
                J[k, k] = ch[k] @ tan[k + 1] / nrm[k]
            if k > 0:
                J[k, k - 1] = -(ch[k] @ tan[k]) / nrm[k]
        J[:, -1] = -1.0
        return J

    x0 = np.append(np.linspace(0.0, L, n + 1)[1:-1], L / n)
    sol = least_squares(resid, x0, jac=jac, bounds=(np.zeros(n), np.full(n, L)), xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200)
    t = full(sol.x)
    if np.max(np.abs(resid(sol.x))) >= tol or np.any(np.diff(t) <= 0):
        return None
    out, _ = at(t)
    out[0], out[-1] = poly[0], poly[-1]
    return out


def _accept(poly: np.ndarray, s: float, n: int) -> np.ndarray | None:
    pts, resid = _walk(poly, s, n)
    if abs(resid) >= 1e-10:
        return None
    if len(pts) == n:
        # stopped one chord short with the end point at distance s (within tolerance)
        pts.append(poly[-1])
    if len(pts) != n + 1:
        return None
    out = np.array(pts)
    out[-1] = poly[-1]
    return out


# ---------------------------------------------------------------------------
# normalisation and samples


@dataclass
class Normalizer:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)

    @classmethod
    def from_limits(cls, limits) -> "Normalizer":
        limits = np.asarray(limits, dtype=float)
        return cls(limits[:, 0], limits[:, 1])

    def normalize(self, q):
        return 2.0 * (np.asarray(q) - self.lo) / (self.hi - self.lo) - 1.0

    def denormalize(self, x):
        return (np.asarray(x) + 1.0) * 0.5 * (self.hi - self.lo) + self.lo

    def to_json(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass
class TaskSample:
    start: np.ndarray
    goal: np.ndarray
    target: np.ndarray  # (horizon, D), normalized
    scene_id: int = -1
    cloud_embedding: np.ndarray | None = None


def window_targets(configs: np.ndarray, horizon: int = 16) -> np.ndarray:
    """Row i holds configs[i+1 : i+1+horizon], padded with the last config; shape (n-1, horizon, D)."""
    configs = np.asarray(configs, dtype=float)
    n = len(configs)
    idx = np.minimum(np.arange(n - 1)[:, None] + 1 + np.arange(horizon)[None, :], n - 1)
    return configs[idx]


def build_samples(plan: Plan, normalizer: Normalizer, horizon: int = 16, cloud_embedding=None) -> list[TaskSample]:
    if len(plan) < 2:
        return []
    q = plan.configs
    targets = normalizer.normalize(window_targets(q, horizon))
    goal = normalizer.normalize(q[-1])
    return [
        TaskSample(
            start=normalizer.normalize(q[i]),
            goal=goal.copy(),
            target=targets[i],
            scene_id=plan.scene_id,
            cloud_embedding=None if cloud_embedding is None else np.asarray(cloud_embedding),
        )
        for i in range(len(q) - 1)
    ]


@dataclass
class SampleArrays:
    """Column-stacked samples; ``scene_id`` indexes per-scene embeddings."""

    start: np.ndarray
    goal: np.ndarray
    target: np.ndarray
    scene_id: np.ndarray

    def __len__(self) -> int:
        return len(self.start)

    def subset(self, idx) -> "SampleArrays":
        return SampleArrays(self.start[idx], self.goal[idx], self.target[idx], self.scene_id[idx])


def stack_samples(plans: Iterable[Plan], normalizer: Normalizer, horizon: int = 16, D: int | None = None) -> SampleArrays:
    starts, goals, targets, sids = [], [], [], []
    for p in plans:
        if len(p) < 2:
            continue
        q = p.configs
        n = len(q) - 1
        starts.append(normalizer.normalize(q[:-1]))
        goals.append(np.repeat(normalizer.normalize(q[-1:]), n, axis=0))
        targets.append(normalizer.normalize(window_targets(q, horizon)))
        sids.append(np.full(n, p.scene_id, dtype=np.int64))
    if not starts:
        D = D or 0
        return SampleArrays(np.zeros((0, D)), np.zeros((0, D)), np.zeros((0, horizon, D)), np.zeros(0, np.int64))
    return SampleArrays(np.concatenate(starts), np.concatenate(goals), np.concatenate(targets), np.concatenate(sids))


def refine_filter(plans: Sequence[Plan], keypoint_counts: Sequence[int], min_keypoints: int = 5):
    """Split into (kept, removed): kept plans have at least ``min_keypoints`` keypoints."""
    if len(plans) != len(keypoint_counts):
        raise ValueError("one keypoint count per plan required")
    kept = [p for p, k in zip(plans, keypoint_counts) if k >= min_keypoints]
    removed = [p for p, k in zip(plans, keypoint_counts) if k < min_keypoints]
    return kept, removed
