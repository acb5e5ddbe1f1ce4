"""Evaluation records, aggregation and runtime comparison.

Aggregates are pure functions of the per-task rows so every report can be
rebuilt from the raw CSV.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .plans import Plan

TASK_FIELDS = [
    "task_id",
    "scene_id",
    "has_reference",
    "keypoints",
    "hard",
    "success",
    "status",
    "rounds",
    "in_batch",
    "arc_length",
    "reference_length",
    "length_diff",
]
TIMING_FIELDS = ["task_id", "inference_s", "collision_s", "total_s"]
METRIC_FIELDS = [
    "model",
    "tasks",
    "tasks_without_reference",
    "hard_tasks",
    "success_all",
    "success_hard",
    "length_diff_mean",
    "length_diff_var",
    "length_diff_max",
    "length_diff_min",
    "length_diff_count",
]


class TaskListMismatch(ValueError):
    pass


def length_diff(generated: Plan, reference: Plan) -> float:
    """Signed arc-length difference; negative means the generated plan is shorter."""
    return generated.arc_length - reference.arc_length


def summary(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return {"mean": float("nan"), "var": float("nan"), "max": float("nan"), "min": float("nan"), "count": 0}
    return {"mean": float(v.mean()), "var": float(v.var()), "max": float(v.max()), "min": float(v.min()), "count": len(v)}


def histogram(rates: Sequence[float], bins: int = 10) -> np.ndarray:
    """Counts over ``bins`` equal bins of [0, 1]; 1.0 falls in the last bin."""
    counts, _ = np.histogram(np.asarray(rates, dtype=float), bins=bins, range=(0.0, 1.0))
    return counts


@dataclass
class EvalReport:
    model: str
    tasks: int
    tasks_without_reference: int
    hard_tasks: int
    success_all: float
    success_hard: float
    length_diff: dict
    timing: dict = field(default_factory=dict)
    in_batch_histogram: list[int] = field(default_factory=list)

    def metrics_row(self) -> dict:
        ld = self.length_diff
        return {
            "model": self.model,
            "tasks": self.tasks,
            "tasks_without_reference": self.tasks_without_reference,
            "hard_tasks": self.hard_tasks,
            "success_all": _fmt(self.success_all),
            "success_hard": _fmt(self.success_hard),
            "length_diff_mean": _fmt(ld["mean"]),
            "length_diff_var": _fmt(ld["var"]),
            "length_diff_max": _fmt(ld["max"]),
            "length_diff_min": _fmt(ld["min"]),
            "length_diff_count": ld["count"],
        }


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6f}"


def _truthy(v) -> bool:
    return v in (True, 1, "1", "True", "true")


def aggregate(
    model: str, rows: Iterable[Mapping], timing_rows: Iterable[Mapping] = (), reference_only: bool = True
) -> EvalReport:
    """Summary report from per-task rows.

    With ``reference_only`` (the default) only tasks that have an oracle
    reference plan count; ad-hoc task lists such as empty-scene checks pass False.
    """
    rows = sorted(rows, key=lambda r: int(r["task_id"]))
    ref = [r for r in rows if _truthy(r["has_reference"])] if reference_only else rows
    if not ref:
        raise ValueError("no tasks with a reference plan")
    hard = [r for r in ref if _truthy(r["hard"])]
    succ = [_truthy(r["success"]) for r in ref]
    diffs = [float(r["length_diff"]) for r in ref if _truthy(r["success"]) and _truthy(r["has_reference"])]
    timing = {}
    trows = list(timing_rows)
    if trows:
        for key in ("total_s", "inference_s", "collision_s"):
            timing[key] = summary([float(t[key]) for t in trows])
    return EvalReport(
        model=model,
        tasks=len(ref),
        tasks_without_reference=len(rows) - len(ref),
        hard_tasks=len(hard),
        success_all=100.0 * float(np.mean(succ)),
        success_hard=100.0 * float(np.mean([_truthy(r["success"]) for r in hard])) if hard else float("nan"),
        length_diff=summary(diffs),
        timing=timing,
        in_batch_histogram=histogram([float(r["in_batch"]) for r in ref]).tolist(),
    )


def write_rows(path, fields: Sequence[str], rows: Iterable[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class RuntimeReport:
    per_task: list[dict]
    oracle_total: float
    neural_total: float
    ratio: float
    neural_mean: float
    inference_mean: float
    collision_mean: float


def compare_runtime(neural: Mapping[int, Mapping], oracle: Mapping[int, float] | float) -> RuntimeReport:
    """Oracle time over neural planning time, per task and in aggregate (sum over sum).

    ``neural`` maps task id to a timing row (``total_s``, ``inference_s``,
    ``collision_s``); ``oracle`` is either a per-task time map or one budget
    applied to every task.
    """
    ids = sorted(neural)
    if isinstance(oracle, Mapping):
        if sorted(oracle) != ids:
            raise TaskListMismatch(f"neural has {len(ids)} tasks, oracle has {len(oracle)}; lists differ")
        o = {i: float(oracle[i]) for i in ids}
    else:
        o = {i: float(oracle) for i in ids}
    if not ids:
        raise ValueError("no tasks")
    per = []
    for i in ids:
        n = float(neural[i]["total_s"])
        per.append(
            {
                "task_id": i,
                "oracle_s": o[i],
                "neural_s": n,
                "inference_s": float(neural[i]["inference_s"]),
                "collision_s": float(neural[i]["collision_s"]),
                "ratio": o[i] / n if n > 0 else float("inf"),
            }
        )
    ot = sum(r["oracle_s"] for r in per)
    nt = sum(r["neural_s"] for r in per)
    return RuntimeReport(
        per_task=per,
        oracle_total=ot,
        neural_total=nt,
        ratio=ot / nt if nt > 0 else float("inf"),
        neural_mean=nt / len(per),
        inference_mean=float(np.mean([r["inference_s"] for r in per])),
        collision_mean=float(np.mean([r["collision_s"] for r in per])),
    )
