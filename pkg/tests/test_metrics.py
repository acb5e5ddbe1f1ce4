import math

import numpy as np
import pytest

from keydiff.metrics import (
    METRIC_FIELDS,
    TASK_FIELDS,
    TaskListMismatch,
    aggregate,
    compare_runtime,
    histogram,
    length_diff,
    read_rows,
    summary,
    write_rows,
)
from keydiff.plans import Plan


def fake_rows(n=50, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        kp = int(rng.integers(2, 9))
        ok = bool(rng.random() < 0.7)
        ref = bool(rng.random() < 0.9)
        arc, rl = float(rng.uniform(1, 3)), float(rng.uniform(1, 3))
        rows.append({
            "task_id": i, "scene_id": i // 5, "has_reference": int(ref), "keypoints": kp, "hard": int(kp > 4),
            "success": int(ok), "status": "Success" if ok else "AllCollide", "rounds": 1, "in_batch": float(rng.random()),
            "arc_length": arc, "reference_length": rl, "length_diff": arc - rl,
        })
    return rows


def test_length_diff_sign():
    short = Plan(np.array([[0.0, 0], [1, 0]]))
    long = Plan(np.array([[0.0, 0], [1, 1], [1, 0]]))
    assert length_diff(short, long) == pytest.approx(1 - (math.sqrt(2) + 1))
    assert length_diff(long, long) == 0.0


def test_summary_and_empty():
    s = summary([1.0, 2.0, 3.0])
    assert s == {"mean": 2.0, "var": pytest.approx(2 / 3), "max": 3.0, "min": 1.0, "count": 3}
    assert summary([])["count"] == 0 and math.isnan(summary([])["mean"])


def test_histogram_edges():
    h = histogram([0.0, 0.05, 0.1, 0.99, 1.0])
    assert h.tolist() == [2, 1, 0, 0, 0, 0, 0, 0, 0, 2]
    assert histogram([1.0] * 7).sum() == 7


def test_aggregate_recount():
    rows = fake_rows()
    rep = aggregate("m", rows)
    ref = [r for r in rows if r["has_reference"]]
    hard = [r for r in ref if r["keypoints"] > 4]
    assert rep.tasks == len(ref) and rep.tasks_without_reference == len(rows) - len(ref)
    assert rep.hard_tasks == len(hard)
    assert rep.success_all == pytest.approx(100 * sum(r["success"] for r in ref) / len(ref))
    assert rep.success_hard == pytest.approx(100 * sum(r["success"] for r in hard) / len(hard))
    diffs = [r["length_diff"] for r in ref if r["success"]]
    assert rep.length_diff["count"] == len(diffs)
    assert rep.length_diff["mean"] == pytest.approx(np.mean(diffs))
    assert sum(rep.in_batch_histogram) == len(ref)


def test_aggregate_all_rows_mode():
    rows = fake_rows()
    rep = aggregate("m", rows, reference_only=False)
    assert rep.tasks == len(rows) and rep.tasks_without_reference == 0
    # length differences still need a reference plan
    assert rep.length_diff["count"] == sum(1 for r in rows if r["success"] and r["has_reference"])


def test_aggregate_needs_reference():
    rows = [dict(r, has_reference=0) for r in fake_rows(5)]
    with pytest.raises(ValueError):
        aggregate("m", rows)


def test_aggregate_from_csv_matches_memory(tmp_path):
    rows = fake_rows()
    write_rows(tmp_path / "t.csv", TASK_FIELDS, rows)
    a = aggregate("m", rows).metrics_row()
    b = aggregate("m", read_rows(tmp_path / "t.csv")).metrics_row()
    assert a == b and list(a) == METRIC_FIELDS


def test_aggregate_order_independent():
    rows = fake_rows()
    assert aggregate("m", rows).metrics_row() == aggregate("m", rows[::-1]).metrics_row()


def test_aggregate_timing_summary():
    rows = fake_rows(4)
    trows = [{"task_id": i, "inference_s": 0.1 * i, "collision_s": 0.01, "total_s": 0.1 * i + 0.02} for i in range(4)]
    rep = aggregate("m", rows, trows)
    assert rep.timing["inference_s"]["mean"] == pytest.approx(0.15)
    assert rep.timing["total_s"]["max"] == pytest.approx(0.32)


def test_compare_runtime_equal_times():
    neural = {i: {"total_s": 2.0, "inference_s": 1.5, "collision_s": 0.4} for i in range(5)}
    rep = compare_runtime(neural, {i: 2.0 for i in range(5)})
    assert rep.ratio == 1.0 and all(r["ratio"] == 1.0 for r in rep.per_task)
    assert rep.inference_mean == 1.5 and rep.collision_mean == 0.4 and rep.neural_mean == 2.0


def test_compare_runtime_budget_and_recount():
    rng = np.random.default_rng(1)
    neural = {i: {"total_s": t, "inference_s": 0.8 * t, "collision_s": 0.1 * t} for i, t in enumerate(rng.uniform(0.1, 1, 20))}
    rep = compare_runtime(neural, 5.0)
    assert rep.oracle_total == pytest.approx(100.0)
    assert rep.ratio == pytest.approx(100.0 / sum(v["total_s"] for v in neural.values()))
    assert [r["task_id"] for r in rep.per_task] == list(range(20))


def test_compare_runtime_mismatch():
    neural = {i: {"total_s": 1.0, "inference_s": 1.0, "collision_s": 0.0} for i in range(3)}
    with pytest.raises(TaskListMismatch):
        compare_runtime(neural, {0: 1.0, 1: 1.0})
    with pytest.raises(ValueError):
        compare_runtime({}, 5.0)
