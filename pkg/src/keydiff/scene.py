"""Random box-obstacle scenes and surface point clouds."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class PlacementInfeasible(RuntimeError):
    pass


class EmptyScene(ValueError):
    pass


def rotation_matrix(rotation, dim: int) -> np.ndarray:
    """Planar rotation by one angle, or yaw about z in 3D."""
    a = float(np.atleast_1d(rotation)[0])
    c, s = math.cos(a), math.sin(a)
    if dim == 2:
        return np.array([[c, -s], [s, c]])
    if dim == 3:
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ValueError(f"unsupported workspace dimension {dim}")


@dataclass
class BoxObstacle:
    center: np.ndarray
    half_extents: np.ndarray
    rotation: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.half_extents = np.asarray(self.half_extents, dtype=float)
        self.rotation = float(self.rotation)
        if np.any(self.half_extents <= 0):
            raise ValueError("half_extents must be strictly positive")
        if self.center.shape != self.half_extents.shape:
            raise ValueError("center and half_extents dimension mismatch")

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def R(self) -> np.ndarray:
        return rotation_matrix(self.rotation, self.dim)

    def corners(self) -> np.ndarray:
        d = self.dim
        signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
        return self.center + (signs * self.half_extents) @ self.R.T

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.center) @ self.R

    def distance_to_surface(self, pts: np.ndarray) -> np.ndarray:
        """Unsigned distance from points to the box boundary."""
        p = np.abs(self.to_local(np.atleast_2d(pts)))
        q = p - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = -np.max(q, axis=1)
        return np.where(np.all(q <= 0.0, axis=1), inside, outside)

    def to_json(self) -> dict:
        return {
            "center": [float(v) for v in self.center],
            "half_extents": [float(v) for v in self.half_extents],
            "rotation": self.rotation,
        }


@dataclass
class Scene:
    obstacles: list[BoxObstacle]
    bounds: np.ndarray  # (2, d): lo row, hi row
    seed: int = 0

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float)

    @property
    def dim(self) -> int:
        return self.bounds.shape[1]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(centers, half_extents, rotations) stacked for vectorised checks."""
        d = self.dim
        if not self.obstacles:
            return np.zeros((0, d)), np.ones((0, d)), np.zeros((0, d, d))
        return (
            np.stack([o.center for o in self.obstacles]),
            np.stack([o.half_extents for o in self.obstacles]),
            np.stack([o.R for o in self.obstacles]),
        )

    def to_json(self) -> dict:
        return {
            "seed": int(self.seed),
            "bounds": self.bounds.tolist(),
            "obstacles": [o.to_json() for o in self.obstacles],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(
            obstacles=[BoxObstacle(**o) for o in d["obstacles"]],
            bounds=np.asarray(d["bounds"], dtype=float),
            seed=int(d["seed"]),
        )


@dataclass
class SceneParams:
    n_obstacles: Sequence[int] = (3, 4)
    size_range: tuple[float, float] = (0.05, 0.25)
    min_spacing: float = 0.30
    bounds: tuple[tuple[float, ...], tuple[float, ...]] = ((-1.5, -1.5), (1.5, 1.5))
    # optional placement annulus around `anchor` (e.g. the arm base): every box keeps
    # `anchor_clearance` between the anchor and its bounding circle, and its center
    # lies within `anchor_max_distance`
    anchor: tuple[float, ...] | None = None
    anchor_clearance: float = 0.0
    anchor_max_distance: float = math.inf
    max_attempts: int = 1000

    @property
    def dim(self) -> int:
        return len(self.bounds[0])


def _box_circumradius(half: np.ndarray) -> float:
    return float(np.linalg.norm(half))


def sample_scene(params: SceneParams, seed: int) -> Scene:
    """Rejection-sample a scene; a pure function of ``(params, seed)``."""
    rng = np.random.default_rng(seed)
    bounds = np.asarray(params.bounds, dtype=float)
    d = bounds.shape[1]
    n = int(rng.choice(np.asarray(params.n_obstacles)))
    lo_s, hi_s = params.size_range
    anchor = None
    if params.anchor_clearance > 0 or math.isfinite(params.anchor_max_distance):
        anchor = np.zeros(d) if params.anchor is None else np.asarray(params.anchor, float)
    obstacles: list[BoxObstacle] = []
    attempts = 0
    while len(obstacles) < n:
        attempts += 1
        if attempts > params.max_attempts:
            raise PlacementInfeasible(
                f"placed {len(obstacles)}/{n} obstacles after {params.max_attempts} attempts (seed={seed})"
            )
        half = rng.uniform(lo_s, hi_s, size=d)
        center = rng.uniform(bounds[0], bounds[1])
        rot = float(rng.uniform(-math.pi, math.pi))
        box = BoxObstacle(center, half, rot)
        corners = box.corners()
        if np.any(corners < bounds[0]) or np.any(corners > bounds[1]):
            continue
        if any(np.linalg.norm(center - o.center) < params.min_spacing for o in obstacles):
            continue
        if anchor is not None:
            r = np.linalg.norm(center - anchor)
            if r < params.anchor_clearance + _box_circumradius(half) or r > params.anchor_max_distance:
                continue
        obstacles.append(box)
    return Scene(obstacles=obstacles, bounds=bounds, seed=int(seed))


def _faces(box: BoxObstacle) -> list[tuple[int, float, float]]:
    """Boundary facets as (axis, sign, measure) in the box frame."""
    h = box.half_extents
    d = box.dim
    out = []
    for ax in range(d):
        others = [2 * h[j] for j in range(d) if j != ax]
        measure = float(np.prod(others)) if others else 1.0
        out.extend([(ax, -1.0, measure), (ax, 1.0, measure)])
    return out


def face_measures(scene: Scene) -> np.ndarray:
    """Area (3D) or length (2D) of every facet, obstacle-major order."""
    return np.array([m for box in scene.obstacles for (_, _, m) in _faces(box)])


def sample_point_cloud(scene: Scene, n_points: int, rng: np.random.Generator, return_faces: bool = False):
    """Uniform samples over all obstacle surfaces (facet chosen proportional to its measure)."""
    if not scene.obstacles:
        raise EmptyScene("cannot sample a point cloud from a scene without obstacles")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    facets = [(box, ax, sg) for box in scene.obstacles for (ax, sg, _) in _faces(box)]
    w = face_measures(scene)
    idx = rng.choice(len(facets), size=n_points, p=w / w.sum())
    d = scene.dim
    u = rng.uniform(-1.0, 1.0, size=(n_points, d))
    pts = np.empty((n_points, d))
    for f, (box, ax, sg) in enumerate(facets):
        sel = idx == f
        if not np.any(sel):
            continue
        local = u[sel] * box.half_extents
        local[:, ax] = sg * box.half_extents[ax]
        pts[sel] = box.center + local @ box.R.T
    return (pts, idx) if return_faces else pts


def distance_to_surfaces(scene: Scene, pts: np.ndarray) -> np.ndarray:
    return np.min(np.stack([o.distance_to_surface(pts) for o in scene.obstacles]), axis=0)


def normalize_cloud(pts: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    lo, hi = bounds
    return 2.0 * (pts - lo) / (hi - lo) - 1.0


def denormalize_cloud(pts: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    lo, hi = bounds
    return (pts + 1.0) * 0.5 * (hi - lo) + lo


def write_scenes(path, scenes: Iterable[Scene]) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def read_scenes(path) -> list[Scene]:
    return [Scene.from_json(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
