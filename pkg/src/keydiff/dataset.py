"""Oracle-plan corpus generation, binary shards and summary statistics."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .arm import ArmSpec, CollisionChecker, SamplingExhausted, sample_valid_config
from .oracle import NoPlanFound, OracleParams, PlannerBudget, plan_oracle
from .plans import (
    FIXED_STEP,
    KEYPOINT,
    RAW,
    Normalizer,
    Plan,
    SampleArrays,
    arc_length,
    extract_keypoints,
    refine_filter,
    resample_fixed_step,
    second_difference_norms,
    stack_samples,
)
from .scene import PlacementInfeasible, Scene, SceneParams, sample_point_cloud, sample_scene

log = logging.getLogger(__name__)

MAGIC = b"KDDS1"
TRAIN, TEST = 0, 1


class EmptyDataset(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


def desk_scene_params() -> SceneParams:
    # obstacles sit in the annulus the arm can reach, clear of the base
    return SceneParams(anchor=(0.0, 0.0), anchor_clearance=0.5, anchor_max_distance=1.1, max_attempts=100_000)


@dataclass
class DatasetConfig:
    n_scenes: int = 500
    plans_per_scene: int = 10
    budget_s: float = 5.0
    seed: int = 0
    cloud_points: int = 1024
    test_fraction: float = 0.1
    step: float = 0.1
    eps: float | None = None  # None: calibrate on the corpus
    norm: str = "linf"
    horizon: int = 16
    representation: str = KEYPOINT
    refined: bool = False
    min_keypoints: int = 5
    # attempts per scene before giving up on reaching plans_per_scene
    attempts_factor: float = 2.0
    arm: ArmSpec = field(default_factory=ArmSpec)
    scene: SceneParams = field(default_factory=desk_scene_params)
    oracle: OracleParams = field(default_factory=OracleParams)

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("arm", "scene", "oracle")}
        d["arm"] = self.arm.to_json()
        d["scene"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.scene).items()}
        d["scene"]["anchor_max_distance"] = _finite_or_none(self.scene.anchor_max_distance)
        d["oracle"] = asdict(self.oracle)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        arm = ArmSpec.from_json(d.pop("arm")) if "arm" in d else ArmSpec()
        sc = dict(d.pop("scene", {}))
        if sc.get("anchor_max_distance", 0) is None:
            sc["anchor_max_distance"] = math.inf
        scene = SceneParams(**{**asdict(desk_scene_params()), **sc})
        oracle = OracleParams(**d.pop("oracle", {}))
        return cls(**d, arm=arm, scene=scene, oracle=oracle)


def _finite_or_none(x):
    return x if math.isfinite(x) else None


def scene_seed(master: int, scene_id: int) -> int:
    return int(np.random.SeedSequence([master, scene_id]).generate_state(1, np.uint64)[0])


def split_scene_ids(scene_ids: Sequence[int], test_fraction: float, seed: int) -> dict[int, int]:
    """Deterministic scene-level split; at least one test scene when there are two or more."""
    ids = sorted(scene_ids)
    n_test = int(round(test_fraction * len(ids)))
    if len(ids) >= 2:
        n_test = min(max(n_test, 1), len(ids) - 1)
    else:
        n_test = 0
    perm = np.random.default_rng([seed, 0x5117]).permutation(len(ids))
    test = {ids[i] for i in perm[:n_test]}
    return {i: (TEST if i in test else TRAIN) for i in ids}


@dataclass
class SceneRecord:
    scene_id: int
    scene: Scene
    cloud: np.ndarray
    plans: list[Plan]
    attempts: int
    failures: int


def generate_scene(cfg: DatasetConfig, scene_id: int) -> SceneRecord | None:
    """One scene plus its oracle plans; None when the scene is discarded."""
    try:
        scene = sample_scene(cfg.scene, scene_seed(cfg.seed, scene_id))
    except PlacementInfeasible as e:
        log.warning("scene %d discarded: %s", scene_id, e)
        return None
    rng = np.random.default_rng([cfg.seed, scene_id, 1])
    cloud = sample_point_cloud(scene, cfg.cloud_points, rng) if scene.obstacles else np.zeros((0, scene.dim))
    checker = CollisionChecker(cfg.arm, scene)
    budget = PlannerBudget(cfg.budget_s)
    plans: list[Plan] = []
    attempts = failures = 0
    cap = max(cfg.plans_per_scene, int(math.ceil(cfg.attempts_factor * cfg.plans_per_scene)))
    while len(plans) < cfg.plans_per_scene and attempts < cap:
        attempts += 1
        try:
            start = sample_valid_config(cfg.arm, checker, rng)
            goal = sample_valid_config(cfg.arm, checker, rng)
            plans.append(plan_oracle(cfg.arm, scene, start, goal, budget, rng, cfg.oracle, scene_id, checker))
        except (NoPlanFound, SamplingExhausted) as e:
            failures += 1
            log.info("scene %d attempt %d failed: %s", scene_id, attempts, e)
    if failures > 0.5 * attempts:
        log.warning("scene %d discarded: oracle failed on %d of %d tasks", scene_id, failures, attempts)
        return None
    return SceneRecord(scene_id, scene, cloud, plans, attempts, failures)


def _run_scene(args):
    cfg, sid = args
    return generate_scene(cfg, sid)


# ---------------------------------------------------------------------------
# keypoint threshold calibration


def calibrate_eps(fixed_plans: Sequence[Plan], norm: str = "linf", target=(4, 8), grid=None) -> float:
    """Pick the threshold whose median keypoint count sits in ``target``.

    The median count is non-increasing in the threshold; we take the log-midpoint of
    the feasible interval on a grid, or the grid point whose median is nearest the
    target band when no grid point lands inside it.
    """
    if not fixed_plans:
        raise EmptyDataset("cannot calibrate on an empty corpus")
    grid = np.geomspace(1e-4, 1.0, 241) if grid is None else np.asarray(grid)
    sd = [np.sort(second_difference_norms(p.configs, norm)) for p in fixed_plans]
    counts = np.array([[2 + len(s) - np.searchsorted(s, e, side="right") for e in grid] for s in sd])
    med = np.median(counts, axis=0)
    lo_t, hi_t = target
    inside = np.flatnonzero((med >= lo_t) & (med <= hi_t))
    if len(inside):
        return float(np.sqrt(grid[inside[0]] * grid[inside[-1]]))
    miss = np.where(med < lo_t, lo_t - med, med - hi_t)
    k = int(np.argmin(miss))
    log.warning("no threshold puts the median keypoint count in %s; using %.4g (median %.1f)", target, grid[k], med[k])
    return float(grid[k])


def to_representation(plan: Plan, representation: str, step: float, eps: float, norm: str = "linf") -> Plan:
    if representation == RAW:
        return plan
    fixed = resample_fixed_step(plan, step)
    if representation == FIXED_STEP:
        return fixed
    if representation == KEYPOINT:
        return extract_keypoints(fixed, eps, norm) if len(fixed) >= 2 else fixed.with_configs(fixed.configs, KEYPOINT)
    raise ValueError(f"unknown representation {representation!r}")


def keypoint_counts(plans: Sequence[Plan], step: float, eps: float, norm: str = "linf") -> np.ndarray:
    return np.array([len(to_representation(p, KEYPOINT, step, eps, norm)) for p in plans], dtype=np.int64)


# ---------------------------------------------------------------------------
# statistics


@dataclass
class DatasetStats:
    count: int
    mean: float
    var: float
    max: float
    min: float
    keypoint_hist: dict[int, int] = field(default_factory=dict)


def dataset_stats(plans: Sequence[Plan], metric: str = "l2", keypoints: Sequence[int] | None = None) -> DatasetStats:
    """Arc-length statistics (population variance) plus an optional keypoint-count histogram."""
    if len(plans) == 0:
        raise EmptyDataset("no plans")
    L = np.array([arc_length(p.configs, metric) for p in plans])
    hist = {}
    if keypoints is not None:
        vals, cnt = np.unique(np.asarray(keypoints), return_counts=True)
        hist = {int(v): int(c) for v, c in zip(vals, cnt)}
    return DatasetStats(len(L), float(L.mean()), float(L.var()), float(L.max()), float(L.min()), hist)


def write_stats_csv(path, rows: dict[str, DatasetStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "count", "mean", "var", "max", "min"])
        for split, s in rows.items():
            w.writerow([split, s.count, f"{s.mean:.6f}", f"{s.var:.6f}", f"{s.max:.6f}", f"{s.min:.6f}"])


# ---------------------------------------------------------------------------
# container


@dataclass
class Dataset:
    header: dict
    scenes: list[Scene]
    scene_ids: np.ndarray  # (S,)
    clouds: np.ndarray  # (S, P, d) meters
    plans: list[Plan]  # raw oracle plans
    plan_split: np.ndarray  # (n_plans,) TRAIN / TEST
    samples: SampleArrays  # training samples for header["representation"]

    @property
    def arm(self) -> ArmSpec:
        return ArmSpec.from_json(self.header["arm"])

    @property
    def normalizer(self) -> Normalizer:
        n = self.header["normalizer"]
        return Normalizer(n["lo"], n["hi"])

    @property
    def eps(self) -> float:
        return float(self.header["eps"])

    def scene_by_id(self, sid: int) -> Scene:
        return self.scenes[int(np.flatnonzero(self.scene_ids == sid)[0])]

    def cloud_by_id(self, sid: int) -> np.ndarray:
        return self.clouds[int(np.flatnonzero(self.scene_ids == sid)[0])]

    def split_plans(self, split: int) -> list[Plan]:
        return [p for p, s in zip(self.plans, self.plan_split) if s == split]


def _pack(arr: np.ndarray, dtype) -> bytes:
    return np.ascontiguousarray(arr, dtype=dtype).tobytes()


def save_dataset(path, ds: Dataset) -> None:
    header = dict(ds.header)
    D = int(header["D"])
    lengths = np.array([len(p) for p in ds.plans], dtype=np.int64)
    header["counts"] = {
        "scenes": len(ds.scenes),
        "plans": len(ds.plans),
        "plan_configs": int(lengths.sum()),
        "samples": len(ds.samples),
    }
    header["P"] = int(ds.clouds.shape[1]) if ds.clouds.ndim == 3 else 0
    scenes_blob = "\n".join(json.dumps(s.to_json(), sort_keys=True) for s in ds.scenes).encode()
    hdr = json.dumps(header, sort_keys=True).encode()
    index = np.stack(
        [
            np.array([p.scene_id for p in ds.plans], dtype=np.int64),
            np.asarray(ds.plan_split, dtype=np.int64),
            lengths,
        ],
        axis=1,
    ) if ds.plans else np.zeros((0, 3), np.int64)
    configs = np.concatenate([p.configs for p in ds.plans]) if ds.plans else np.zeros((0, D))
    s = ds.samples
    parts = [
        MAGIC,
        struct.pack("<Q", len(hdr)),
        hdr,
        struct.pack("<Q", len(scenes_blob)),
        scenes_blob,
        _pack(ds.scene_ids, "<i8"),
        _pack(ds.clouds, "<f4"),
        _pack(index, "<i8"),
        _pack(configs, "<f4"),
        _pack(s.start, "<f4"),
        _pack(s.goal, "<f4"),
        _pack(s.target, "<f4"),
        _pack(s.scene_id, "<i8"),
    ]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def u64(self) -> int:
        (v,) = struct.unpack_from("<Q", self.buf, self.off)
        self.off += 8
        return v

    def raw(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise DatasetFormatError("truncated dataset file")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def array(self, dtype, shape) -> np.ndarray:
        n = int(np.prod(shape)) if len(shape) else 1
        size = np.dtype(dtype).itemsize * n
        a = np.frombuffer(self.raw(size), dtype=dtype, count=n).reshape(shape)
        return a.astype(np.float64 if np.dtype(dtype).kind == "f" else np.int64)


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {buf[:5]!r}")
    r = _Reader(buf)
    r.off = 5
    header = json.loads(r.raw(r.u64()))
    blob = r.raw(r.u64()).decode()
    scenes = [Scene.from_json(json.loads(line)) for line in blob.splitlines() if line.strip()]
    c = header["counts"]
    D, H, P, d = header["D"], header["horizon"], header["P"], header["d"]
    scene_ids = r.array("<i8", (c["scenes"],))
    clouds = r.array("<f4", (c["scenes"], P, d))
    index = r.array("<i8", (c["plans"], 3))
    configs = r.array("<f4", (c["plan_configs"], D))
    n = c["samples"]
    samples = SampleArrays(
        r.array("<f4", (n, D)), r.array("<f4", (n, D)), r.array("<f4", (n, H, D)), r.array("<i8", (n,))
    )
    if r.off != len(buf):
        raise DatasetFormatError(f"{path}: {len(buf) - r.off} trailing bytes")
    plans = []
    off = 0
    for sid, _, n_cfg in index:
        plans.append(Plan(configs[off : off + n_cfg], RAW, int(sid)))
        off += n_cfg
    return Dataset(header, scenes, scene_ids, clouds, plans, index[:, 1].copy(), samples)


# ---------------------------------------------------------------------------
# generation


def build_training_samples(
    plans: Sequence[Plan], split: np.ndarray, header: dict, representation: str, refined: bool
) -> tuple[SampleArrays, dict]:
    """Samples from the training split in the requested representation."""
    norm = Normalizer(header["normalizer"]["lo"], header["normalizer"]["hi"])
    train = [p for p, s in zip(plans, split) if s == TRAIN]
    step, eps, nrm = header["step"], header["eps"], header["norm"]
    info = {"train_plans": len(train)}
    if refined:
        train, removed = refine_filter(train, keypoint_counts(train, step, eps, nrm), header["min_keypoints"])
        info.update(refined_kept=len(train), refined_removed=len(removed))
    converted = [to_representation(p, representation, step, eps, nrm) for p in train]
    return stack_samples(converted, norm, header["horizon"], header["D"]), info


def generate_dataset(cfg: DatasetConfig, workers: int = 1, progress=None) -> Dataset:
    """Scenes, clouds and oracle plans, split by scene id; output independent of ``workers``."""
    if cfg.n_scenes < 1 or cfg.plans_per_scene < 1:
        raise ValueError("n_scenes and plans_per_scene must be >= 1")
    jobs = [(cfg, sid) for sid in range(cfg.n_scenes)]
    records: list[SceneRecord | None] = []
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(workers) as pool:
            for rec in pool.imap(_run_scene, jobs):
                records.append(rec)
                if progress:
                    progress(len(records), cfg.n_scenes)
    else:
        for job in jobs:
            records.append(_run_scene(job))
            if progress:
                progress(len(records), cfg.n_scenes)
    kept = [r for r in records if r is not None and r.plans]
    if not kept:
        raise EmptyDataset("every scene was discarded")
    split_of = split_scene_ids([r.scene_id for r in kept], cfg.test_fraction, cfg.seed)
    plans = [p for r in kept for p in r.plans]
    split = np.array([split_of[p.scene_id] for p in plans], dtype=np.int64)
    D, d = cfg.arm.dof, cfg.arm.dim
    eps = cfg.eps
    if eps is None:
        train_fixed = [resample_fixed_step(p, cfg.step) for p, s in zip(plans, split) if s == TRAIN]
        eps = calibrate_eps(train_fixed or [resample_fixed_step(p, cfg.step) for p in plans], cfg.norm)
    normalizer = Normalizer.from_limits(cfg.arm.joint_limits)
    header = {
        "version": 1,
        "D": D,
        "d": d,
        "horizon": cfg.horizon,
        "E": 0,
        "eps": eps,
        "step": cfg.step,
        "norm": cfg.norm,
        "min_keypoints": cfg.min_keypoints,
        "representation": cfg.representation,
        "refined": cfg.refined,
        "seed": cfg.seed,
        "arm": cfg.arm.to_json(),
        "normalizer": normalizer.to_json(),
        "config": cfg.to_json(),
        "discarded_scenes": [r_id for r_id, r in enumerate(records) if r is None],
        "oracle_attempts": int(sum(r.attempts for r in kept)),
        "oracle_failures": int(sum(r.failures for r in kept)),
    }
    samples, info = build_training_samples(plans, split, header, cfg.representation, cfg.refined)
    header["sample_info"] = info
    P = cfg.cloud_points
    clouds = np.stack([r.cloud if len(r.cloud) else np.zeros((P, d)) for r in kept])
    return Dataset(
        header,
        [r.scene for r in kept],
        np.array([r.scene_id for r in kept], dtype=np.int64),
        clouds,
        plans,
        split,
        samples,
    )


def rederive(ds: Dataset, representation: str, refined: bool) -> Dataset:
    """Same scenes and oracle plans, training samples rebuilt for another representation."""
    header = dict(ds.header, representation=representation, refined=refined)
    samples, info = build_training_samples(ds.plans, ds.plan_split, header, representation, refined)
    header["sample_info"] = info
    return Dataset(header, ds.scenes, ds.scene_ids, ds.clouds, ds.plans, ds.plan_split, samples)


def split_stats(ds: Dataset, metric: str = "l2") -> dict[str, DatasetStats]:
    out = {}
    for name, code in (("train", TRAIN), ("test", TEST)):
        plans = ds.split_plans(code)
        if plans:
            out[name] = dataset_stats(plans, metric, keypoint_counts(plans, ds.header["step"], ds.eps, ds.header["norm"]))
    if not out:
        raise EmptyDataset("dataset has no plans")
    return out
