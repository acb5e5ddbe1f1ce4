"""Serial-chain arm kinematics and collision checking against box scenes.

Links are treated as thick segments (capsules in 3D). Segment-to-box distance is
exact: in the box frame the squared distance along a segment is a convex
piecewise quadratic whose breakpoints are the face-plane crossings, so it is
minimised interval by interval.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba as nb
import numpy as np

from .scene import Scene


class SamplingExhausted(RuntimeError):
    pass


@dataclass
class ArmSpec:
    dof: int = 4
    link_lengths: Sequence[float] = (0.4, 0.35, 0.3, 0.25)
    link_radius: float = 0.03
    joint_limits: Sequence[Sequence[float]] = ((-math.pi, math.pi),) + ((-2.6, 2.6),) * 3
    base_position: Sequence[float] = (0.0, 0.0)
    base_yaw: float = 0.0
    # rotation axis per joint in 3D ("z" or "y"); ignored for planar arms
    axes: Sequence[str] | None = None

    def __post_init__(self):
        self.link_lengths = np.asarray(self.link_lengths, dtype=float)
        self.joint_limits = np.asarray(self.joint_limits, dtype=float).reshape(-1, 2)
        self.base_position = np.asarray(self.base_position, dtype=float)
        if self.dof < 2:
            raise ValueError("dof must be >= 2")
        if len(self.link_lengths) != self.dof or len(self.joint_limits) != self.dof:
            raise ValueError("link_lengths / joint_limits must have dof entries")
        if np.any(self.link_lengths <= 0):
            raise ValueError("link lengths must be positive")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ValueError("joint limits must satisfy lo < hi")
        if self.dim == 3 and self.axes is None:
            self.axes = ["z"] + ["y" if i % 2 else "z" for i in range(1, self.dof)]

    @property
    def dim(self) -> int:
        return len(self.base_position)

    @property
    def lo(self) -> np.ndarray:
        return self.joint_limits[:, 0]

    @property
    def hi(self) -> np.ndarray:
        return self.joint_limits[:, 1]

    @property
    def reach(self) -> float:
        return float(self.link_lengths.sum())

    def to_json(self) -> dict:
        return {
            "dof": self.dof,
            "link_lengths": self.link_lengths.tolist(),
            "link_radius": self.link_radius,
            "joint_limits": self.joint_limits.tolist(),
            "base_pose": {"position": self.base_position.tolist(), "yaw": self.base_yaw},
            **({"axes": list(self.axes)} if self.dim == 3 else {}),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ArmSpec":
        pose = d.get("base_pose", {})
        return cls(
            dof=d["dof"],
            link_lengths=d["link_lengths"],
            link_radius=d["link_radius"],
            joint_limits=d["joint_limits"],
            base_position=pose.get("position", (0.0, 0.0)),
            base_yaw=pose.get("yaw", 0.0),
            axes=d.get("axes"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "ArmSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def _rot(axis: str, a: np.ndarray) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    if axis == "z":
        m = [[c, -s, z], [s, c, z], [z, z, o]]
    elif axis == "y":
        m = [[c, z, s], [z, o, z], [-s, z, c]]
    elif axis == "x":
        m = [[o, z, z], [z, c, -s], [z, s, c]]
    else:
        raise ValueError(axis)
    return np.moveaxis(np.array(m), (0, 1), (-2, -1))


def forward_kinematics(spec: ArmSpec, q) -> np.ndarray:
    """Joint positions ``(..., dof + 1, d)``; link ``i`` spans rows ``i`` and ``i + 1``."""
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != spec.dof:
        raise ValueError(f"expected {spec.dof} joint values, got {q.shape[-1]}")
    batch = q.shape[:-1]
    if spec.dim == 2:
        ang = spec.base_yaw + np.cumsum(q, axis=-1)
        steps = spec.link_lengths[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    else:
        R = np.broadcast_to(_rot("z", np.asarray(spec.base_yaw)), batch + (3, 3))
        steps = np.empty(batch + (spec.dof, 3))
        for i, ax in enumerate(spec.axes):
            R = R @ _rot(ax, q[..., i])
            steps[..., i, :] = R[..., :, 0] * spec.link_lengths[i]
    pts = np.concatenate([np.zeros(batch + (1, spec.dim)), np.cumsum(steps, axis=-2)], axis=-2)
    return pts + spec.base_position


# ---------------------------------------------------------------------------
# exact segment / oriented box distance


@nb.njit(cache=True)
def _seg_aabb_sqdist(a, b, h, ts=None):
    """Squared distance between segment ``ab`` and the box ``[-h, h]``; ``ts`` is scratch of size 2d+2."""
    d = a.shape[0]
    if ts is None:
        ts = np.empty(2 * d + 2)
    ts[0] = 0.0
    n = 1
    for j in range(d):
        uj = b[j] - a[j]
        if uj != 0.0:
            for s in (-h[j], h[j]):
                t = (s - a[j]) / uj
                if 0.0 < t < 1.0:
                    # insertion keeps the breakpoints sorted
                    i = n
                    while i > 1 and ts[i - 1] > t:
                        ts[i] = ts[i - 1]
                        i -= 1
                    ts[i] = t
                    n += 1
    ts[n] = 1.0
    n += 1
    best = np.inf
    for k in range(n - 1):
        t0 = ts[k]
        t1 = ts[k + 1]
        tm = 0.5 * (t0 + t1)
        A = 0.0
        Bc = 0.0
        C = 0.0
        for j in range(d):
            uj = b[j] - a[j]
            x = a[j] + tm * uj
            if x > h[j]:
                c = a[j] - h[j]
            elif x < -h[j]:
                c = a[j] + h[j]
            else:
                continue
            A += uj * uj
            Bc += c * uj
            C += c * c
        t = t0
        if A > 0.0:
            t = min(max(-Bc / A, t0), t1)
        v = A * t * t + 2.0 * Bc * t + C
        if v < best:
            best = v
        if best <= 0.0:
            return 0.0
    return max(best, 0.0)


@nb.njit(cache=True)
def _first_invalid(pts, centers, halves, rots, radius, lo, hi):
    """Index of the first configuration in collision / out of bounds, or -1."""
    N, J, d = pts.shape
    M = centers.shape[0]
    r2 = radius * radius
    a = np.empty(d)
    b = np.empty(d)
    ts = np.empty(2 * d + 2)
    # bounding-sphere radii for a cheap reject
    reach2 = np.empty(M)
    for m in range(M):
        hh = 0.0
        for k in range(d):
            hh += halves[m, k] * halves[m, k]
        reach2[m] = (math.sqrt(hh) + radius) ** 2
    for n in range(N):
        for j in range(J):
            for k in range(d):
                if pts[n, j, k] < lo[k] or pts[n, j, k] > hi[k]:
                    return n
        for m in range(M):
            for j in range(J - 1):
                # point-to-segment distance from the box center
                uu = 0.0
                wu = 0.0
                for k in range(d):
                    uk = pts[n, j + 1, k] - pts[n, j, k]
                    uu += uk * uk
                    wu += (centers[m, k] - pts[n, j, k]) * uk
                t = 0.0 if uu == 0.0 else min(max(wu / uu, 0.0), 1.0)
                dd = 0.0
                for k in range(d):
                    e = pts[n, j, k] + t * (pts[n, j + 1, k] - pts[n, j, k]) - centers[m, k]
                    dd += e * e
                if dd > reach2[m]:
                    continue
                # box-frame coordinates: R^T (p - c)
                for k in range(d):
                    sa = 0.0
                    sb = 0.0
                    for i in range(d):
                        sa += rots[m, i, k] * (pts[n, j, i] - centers[m, i])
                        sb += rots[m, i, k] * (pts[n, j + 1, i] - centers[m, i])
                    a[k] = sa
                    b[k] = sb
                if _seg_aabb_sqdist(a, b, halves[m], ts) <= r2:
                    return n
    return -1


@nb.njit(cache=True)
def _valid_mask(pts, centers, halves, rots, radius, lo, hi):
    N = pts.shape[0]
    out = np.empty(N, dtype=np.bool_)
    for n in range(N):
        out[n] = _first_invalid(pts[n : n + 1], centers, halves, rots, radius, lo, hi) < 0
    return out


@nb.njit(cache=True)
def _fk_into(q, lengths, base, yaw, R0, axes, out):
    """Joint positions for one configuration; ``axes`` is empty for planar arms."""
    d = base.shape[0]
    for k in range(d):
        out[0, k] = base[k]
    if d == 2:
        ang = yaw
        for i in range(q.shape[0]):
            ang += q[i]
            out[i + 1, 0] = out[i, 0] + lengths[i] * math.cos(ang)
            out[i + 1, 1] = out[i, 1] + lengths[i] * math.sin(ang)
        return
    R = R0.copy()
    T = np.empty((3, 3))
    for i in range(q.shape[0]):
        c = math.cos(q[i])
        s = math.sin(q[i])
        ax = axes[i]
        # R <- R @ rot(ax, q_i); only the columns touched by the rotation change
        i0, i1 = (0, 1) if ax == 2 else ((2, 0) if ax == 1 else (1, 2))
        for r in range(3):
            T[r, i0] = R[r, i0] * c + R[r, i1] * s
            T[r, i1] = -R[r, i0] * s + R[r, i1] * c
        for r in range(3):
            R[r, i0] = T[r, i0]
            R[r, i1] = T[r, i1]
        for k in range(3):
            out[i + 1, k] = out[i, k] + lengths[i] * R[k, 0]


@nb.njit(cache=True)
def _configs_first_invalid(Q, qlo, qhi, lengths, base, yaw, R0, axes, centers, halves, rots, radius, lo, hi):
    """Like ``_first_invalid`` but takes joint configurations and also checks joint limits."""
    N, D = Q.shape
    pts = np.empty((1, D + 1, base.shape[0]))
    for n in range(N):
        for i in range(D):
            if Q[n, i] < qlo[i] or Q[n, i] > qhi[i]:
                return n
        _fk_into(Q[n], lengths, base, yaw, R0, axes, pts[0])
        if _first_invalid(pts, centers, halves, rots, radius, lo, hi) >= 0:
            return n
    return -1


@nb.njit(cache=True)
def _edge_first_invalid(qa, qb, n, qlo, qhi, lengths, base, yaw, R0, axes, centers, halves, rots, radius, lo, hi):
    """Checks qa + (k/n)(qb - qa) for k = 0..n without materialising the configurations."""
    D = qa.shape[0]
    q = np.empty(D)
    pts = np.empty((1, D + 1, base.shape[0]))
    for k in range(n + 1):
        s = k / n
        for i in range(D):
            q[i] = qa[i] + s * (qb[i] - qa[i])
            if q[i] < qlo[i] or q[i] > qhi[i]:
                return k
        _fk_into(q, lengths, base, yaw, R0, axes, pts[0])
        if _first_invalid(pts, centers, halves, rots, radius, lo, hi) >= 0:
            return k
    return -1


@nb.njit(cache=True)
def _edge_setup(qa, qb, resolution):
    """Canonical (lexicographically smaller first) endpoints and the subdivision count."""
    D = qa.shape[0]
    swap = False
    for i in range(D):
        if qb[i] < qa[i]:
            swap = True
            break
        if qb[i] > qa[i]:
            break
    if swap:
        qa, qb = qb, qa
    ss = 0.0
    for i in range(D):
        ss += (qb[i] - qa[i]) ** 2
    n = max(1, int(math.ceil(math.sqrt(ss) / resolution)))
    return qa, qb, n


@nb.njit(cache=True)
def _edge_check(qa, qb, resolution, qlo, qhi, lengths, base, yaw, R0, axes, centers, halves, rots, radius, lo, hi):
    a, b, n = _edge_setup(qa, qb, resolution)
    return _edge_first_invalid(a, b, n, qlo, qhi, lengths, base, yaw, R0, axes, centers, halves, rots, radius, lo, hi)


@nb.njit(cache=True)
def _polyline_first_bad_edge(Q, resolution, qlo, qhi, lengths, base, yaw, R0, axes, centers, halves, rots, radius, lo, hi):
    """Index of the first segment of ``Q`` failing the edge check, or -1 (a lone config is checked too)."""
    if Q.shape[0] == 1:
        return _edge_check(Q[0], Q[0], resolution, qlo, qhi, lengths, base, yaw, R0, axes, centers, halves, rots, radius, lo, hi)
    for i in range(Q.shape[0] - 1):
        if _edge_check(Q[i], Q[i + 1], resolution, qlo, qhi, lengths, base, yaw, R0, axes, centers, halves, rots, radius, lo, hi) >= 0:
            return i
    return -1


def segment_box_distance(a, b, box) -> float:
    """Exact distance between segment ``ab`` and an oriented box."""
    la = box.to_local(np.asarray(a, float))
    lb = box.to_local(np.asarray(b, float))
    return math.sqrt(_seg_aabb_sqdist(la, lb, box.half_extents))


_AXIS_CODE = {"x": 0, "y": 1, "z": 2}


class CollisionChecker:
    """Caches the scene as flat arrays; all checks are read-only."""

    def __init__(self, spec: ArmSpec, scene: Scene):
        self.spec = spec
        self.scene = scene
        c, h, r = scene.arrays()
        self.centers = np.ascontiguousarray(c, dtype=float)
        self.halves = np.ascontiguousarray(h, dtype=float)
        self.rots = np.ascontiguousarray(r, dtype=float)
        self.lo_ws = np.ascontiguousarray(scene.bounds[0], dtype=float)
        self.hi_ws = np.ascontiguousarray(scene.bounds[1], dtype=float)
        self._kin = (
            np.ascontiguousarray(spec.lo),
            np.ascontiguousarray(spec.hi),
            np.ascontiguousarray(spec.link_lengths, dtype=float),
            np.ascontiguousarray(spec.base_position, dtype=float),
            float(spec.base_yaw),
            np.ascontiguousarray(_rot("z", np.asarray(spec.base_yaw)), dtype=float),
            np.array([_AXIS_CODE[a] for a in (spec.axes or [])], dtype=np.int64),
        )
        self._geo = (self.centers, self.halves, self.rots, float(spec.link_radius), self.lo_ws, self.hi_ws)

    def in_limits(self, Q: np.ndarray) -> np.ndarray:
        return np.all((Q >= self.spec.lo) & (Q <= self.spec.hi), axis=-1)

    def valid_mask(self, Q) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        pts = np.ascontiguousarray(forward_kinematics(self.spec, Q))
        free = _valid_mask(pts, *self._geo)
        return free & self.in_limits(Q)

    def first_invalid(self, Q) -> int:
        """Index of the first invalid row of ``Q`` (limits, bounds or collision), or -1."""
        Q = np.ascontiguousarray(np.atleast_2d(np.asarray(Q, dtype=float)))
        return int(_configs_first_invalid(Q, *self._kin, *self._geo))

    def config_valid(self, q) -> bool:
        return self.first_invalid(q) < 0

    def edge_configs(self, qa, qb, resolution: float) -> np.ndarray:
        """The configurations ``edge_valid`` tests, in canonical order."""
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        qa, qb, n = _edge_setup(np.asarray(qa, dtype=float), np.asarray(qb, dtype=float), float(resolution))
        s = np.arange(n + 1) / n
        return qa + s[:, None] * (qb - qa)

    def edge_valid(self, qa, qb, resolution: float) -> bool:
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        qa = np.ascontiguousarray(qa, dtype=float)
        qb = np.ascontiguousarray(qb, dtype=float)
        return _edge_check(qa, qb, float(resolution), *self._kin, *self._geo) < 0

    def first_bad_edge(self, configs, resolution: float) -> int:
        """First polyline segment failing ``edge_valid``, or -1."""
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        Q = np.ascontiguousarray(np.atleast_2d(np.asarray(configs, dtype=float)))
        return int(_polyline_first_bad_edge(Q, float(resolution), *self._kin, *self._geo))

    def path_valid(self, configs, resolution: float) -> bool:
        """Every segment of a polyline passes ``edge_valid``."""
        return self.first_bad_edge(configs, resolution) < 0


def densify(configs: np.ndarray, resolution: float) -> np.ndarray:
    """Subdivide each segment of a polyline so consecutive spacing is <= ``resolution``."""
    configs = np.asarray(configs, dtype=float)
    seg = np.diff(configs, axis=0)
    n = np.maximum(1, np.ceil(np.linalg.norm(seg, axis=1) / resolution).astype(int))
    parts = [configs[i] + (np.arange(n[i])[:, None] / n[i]) * seg[i] for i in range(len(seg))]
    parts.append(configs[-1:])
    return np.concatenate(parts, axis=0)


def config_valid(spec: ArmSpec, scene: Scene, q) -> bool:
    return CollisionChecker(spec, scene).config_valid(q)


def edge_valid(spec: ArmSpec, scene: Scene, qa, qb, resolution: float) -> bool:
    return CollisionChecker(spec, scene).edge_valid(qa, qb, resolution)


def sample_valid_config(
    spec: ArmSpec,
    scene: Scene | CollisionChecker,
    rng: np.random.Generator,
    max_attempts: int = 1000,
    final_angle: float | None = None,
    return_attempts: bool = False,
):
    """Uniform rejection sampling inside the joint limits.

    ``final_angle`` optionally pins the planar end-link orientation by solving
    for the last joint (an analogue of a fixed grasp orientation).
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    checker = scene if isinstance(scene, CollisionChecker) else CollisionChecker(spec, scene)
    for attempt in range(1, max_attempts + 1):
        q = rng.uniform(spec.lo, spec.hi)
        if final_angle is not None:
            q[-1] = final_angle - spec.base_yaw - q[:-1].sum()
            q[-1] = (q[-1] + math.pi) % (2 * math.pi) - math.pi
        if checker.config_valid(q):
            return (q, attempt) if return_attempts else q
    raise SamplingExhausted(f"no valid configuration in {max_attempts} attempts")
