"""Command-line entry point: ``keydiff <subcommand> ...``.

Every subcommand writes its artifacts plus ``manifest.json`` into ``--out``.
``keydiff rerun <manifest> --out <dir>`` replays a run from its manifest.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Callable

import numpy as np

from . import config as C
from . import metrics as M
from .arm import CollisionChecker, SamplingExhausted, sample_valid_config
from .cloud_ae import Autoencoder, chamfer_meters, train_autoencoder, write_reconstruction_csv
from .dataset import (
    TEST,
    TRAIN,
    Dataset,
    EmptyDataset,
    dataset_stats,
    generate_dataset,
    keypoint_counts,
    load_dataset,
    rederive,
    save_dataset,
    scene_seed,
    split_stats,
    write_stats_csv,
)
from .diffusion.model import DiffusionModel, train_diffusion
from .diffusion.schedule import make_schedule
from .oracle import NoPlanFound, PlannerBudget, plan_oracle
from .planner import (
    DiffusionWindowModel,
    MidpointStub,
    PlanRequest,
    StraightLineStub,
    in_batch_success_rate,
    plan_batched,
    write_candidate_csv,
)
from .plans import FIXED_STEP, KEYPOINT, Plan
from .scene import Scene, sample_scene, write_scenes

log = logging.getLogger("keydiff")

REPRESENTATIONS = {"keypoint": KEYPOINT, "fixed": FIXED_STEP}


class ConfigMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba", "matplotlib"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, args: argparse.Namespace, cfg: dict, argv: list[str], extra: dict | None = None) -> None:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": args.command,
        "argv": argv,
        "seed": args.seed,
        "mode": args.mode,
        "config": cfg,
        "versions": _versions(),
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in files},
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _task_seed(seed: int, task_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), 0x7A5C, int(task_id)]).generate_state(1)[0])


@dataclass
class Task:
    task_id: int
    scene_id: int
    scene: Scene
    start: np.ndarray
    goal: np.ndarray
    reference: Plan | None
    keypoints: int


def dataset_tasks(ds: Dataset, max_tasks: int | None = None) -> list[Task]:
    """Held-out tasks: start/goal and reference of every test-split plan, in file order."""
    test = [p for p, s in zip(ds.plans, ds.plan_split) if s == TEST]
    if max_tasks is not None:
        test = test[:max_tasks]
    if not test:
        raise EmptyDataset("test split is empty")
    kp = keypoint_counts(test, ds.header["step"], ds.eps, ds.header["norm"])
    return [
        Task(i, p.scene_id, ds.scene_by_id(p.scene_id), p.start.copy(), p.goal.copy(), p, int(k))
        for i, (p, k) in enumerate(zip(test, kp))
    ]


def empty_scene_tasks(cfg: dict, n: int, seed: int) -> list[Task]:
    arm = C.arm_from(cfg)
    bounds = np.asarray(cfg["scene"]["bounds"], dtype=float)
    scene = Scene([], bounds, seed)
    checker = CollisionChecker(arm, scene)
    rng = np.random.default_rng([seed, 0xE5])
    tasks = []
    for i in range(n):
        s = sample_valid_config(arm, checker, rng)
        g = sample_valid_config(arm, checker, rng)
        tasks.append(Task(i, -1, scene, s, g, None, 0))
    return tasks


def _planner_kwargs(cfg: dict, args) -> dict:
    p = cfg["planner"]
    K = args.batch_k if getattr(args, "batch_k", None) else p["K"]
    return dict(
        K=int(K),
        goal_tol=p["goal_tol"],
        max_rounds=p["max_rounds"],
        interp_step=p["interp_step"],
        collision_resolution=p["collision_resolution"],
    )


def _load_ae(path) -> Autoencoder:
    p = _need(path, "autoencoder checkpoint")
    return Autoencoder.load(p)


def _check_model(model: DiffusionModel, ds: Dataset | None, ae: Autoencoder | None) -> None:
    if ds is not None and model.spec.action_dim != ds.header["D"]:
        raise ConfigMismatch(f"model D={model.spec.action_dim} but dataset D={ds.header['D']}")
    if model.uses_cloud:
        if ae is None:
            raise ConfigMismatch(f"model expects a {model.embed_dim}-dim cloud embedding (C={model.cond_dim}); pass --ae")
        if ae.spec.embed_dim != model.embed_dim:
            raise ConfigMismatch(f"autoencoder E={ae.spec.embed_dim} but model was trained with E={model.embed_dim}")


def run_tasks(
    make_model: Callable[[Task], object],
    tasks: list[Task],
    cfg: dict,
    args,
    dump_dir: Path | None = None,
    dump_first: int = 0,
) -> tuple[list[dict], list[dict]]:
    arm = C.arm_from(cfg)
    kw = _planner_kwargs(cfg, args)
    rows, timing = [], []
    checkers: dict[int, CollisionChecker] = {}
    for task in tasks:
        key = id(task.scene)
        if key not in checkers:
            checkers[key] = CollisionChecker(arm, task.scene)
        req = PlanRequest(task.scene, task.start, task.goal, **kw)
        res = plan_batched(make_model(task), req, arm, _task_seed(args.seed, task.task_id), checkers[key])
        ref = task.reference
        arc = res.best_plan.arc_length if res.success else float("nan")
        ref_len = ref.arc_length if ref is not None else float("nan")
        rows.append(
            {
                "task_id": task.task_id,
                "scene_id": task.scene_id,
                "has_reference": int(ref is not None),
                "keypoints": task.keypoints,
                "hard": int(task.keypoints > 4),
                "success": int(res.success),
                "status": res.status,
                "rounds": res.rounds_used,
                "in_batch": f"{in_batch_success_rate(res):.6f}",
                "arc_length": M._fmt(arc),
                "reference_length": M._fmt(ref_len),
                "length_diff": M._fmt(arc - ref_len) if (res.success and ref is not None) else "nan",
            }
        )
        timing.append(
            {
                "task_id": task.task_id,
                "inference_s": f"{res.inference_s:.6f}",
                "collision_s": f"{res.collision_s:.6f}",
                "total_s": f"{res.total_s:.6f}",
            }
        )
        if dump_dir is not None and task.task_id < dump_first:
            write_candidate_csv(dump_dir / f"candidates_task{task.task_id:04d}.csv", res, checkers[key])
        log.info("task %d: %s in %d rounds (%.2fs)", task.task_id, res.status, res.rounds_used, res.total_s)
    return rows, timing


def _diffusion_factory(model: DiffusionModel, ds: Dataset | None, ae: Autoencoder | None, init: str):
    cache: dict[int, np.ndarray] = {}

    def make(task: Task):
        emb = None
        if model.uses_cloud:
            if task.scene_id not in cache:
                cache[task.scene_id] = ae.encode(ds.cloud_by_id(task.scene_id))
            emb = cache[task.scene_id]
        return DiffusionWindowModel(model, emb, init)

    return make


def _write_eval(out: Path, name: str, rows, timing, reference_only: bool = True) -> M.EvalReport:
    M.write_rows(out / f"per_task_{name}.csv", M.TASK_FIELDS, rows)
    M.write_rows(out / f"timing_{name}.csv", M.TIMING_FIELDS, timing)
    rep = M.aggregate(name, rows, timing, reference_only)
    with open(out / f"histogram_{name}.csv", "w") as fh:
        fh.write("bin_lo,bin_hi,tasks\n")
        for i, c in enumerate(rep.in_batch_histogram):
            fh.write(f"{i / 10:.1f},{(i + 1) / 10:.1f},{c}\n")
    return rep


def _write_timing_summary(path: Path, reports: list[M.EvalReport]) -> None:
    with open(path, "w") as fh:
        fh.write("model,part,mean,var,max,min\n")
        for r in reports:
            for part in ("total_s", "inference_s", "collision_s"):
                s = r.timing[part]
                fh.write(f"{r.model},{part},{s['mean']:.6f},{s['var']:.6f},{s['max']:.6f},{s['min']:.6f}\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scenes(args, cfg, out: Path) -> dict:
    params = C.scene_params_from(cfg)
    n = args.n_scenes or cfg["dataset"]["n_scenes"]
    scenes = [sample_scene(params, scene_seed(args.seed, i)) for i in range(n)]
    write_scenes(out / "scenes.jsonl", scenes)
    return {"scenes": n}


def cmd_gen_dataset(args, cfg, out: Path) -> dict:
    rep = REPRESENTATIONS[args.representation]
    if args.from_dataset:
        ds = rederive(load_dataset(_need(args.from_dataset, "dataset")), rep, args.refined)
    else:
        if args.n_scenes:
            cfg["dataset"]["n_scenes"] = args.n_scenes
        if args.plans_per_scene:
            cfg["dataset"]["plans_per_scene"] = args.plans_per_scene
        if args.oracle_budget_s:
            cfg["dataset"]["budget_s"] = args.oracle_budget_s
        dcfg = C.dataset_config_from(cfg, args.seed, rep, args.refined)
        t0 = time.perf_counter()
        ds = generate_dataset(dcfg, workers=args.workers, progress=_progress("scenes"))
        log.info("generated %d plans in %.1fs", len(ds.plans), time.perf_counter() - t0)
    save_dataset(out / "dataset.kdds", ds)
    _write_stats(out, ds, "l2")
    return {"plans": len(ds.plans), "samples": len(ds.samples), "eps": ds.eps}


def _progress(what: str):
    def cb(i, n):
        if i == n or i % max(1, n // 20) == 0:
            log.info("%s %d/%d", what, i, n)

    return cb


def _write_stats(out: Path, ds: Dataset, metric: str) -> None:
    stats = split_stats(ds, metric)
    write_stats_csv(out / "stats.csv", stats)
    with open(out / "keypoint_hist.csv", "w") as fh:
        fh.write("split,keypoints,plans\n")
        for split, s in stats.items():
            for k, c in sorted(s.keypoint_hist.items()):
                fh.write(f"{split},{k},{c}\n")


def cmd_stats(args, cfg, out: Path) -> dict:
    ds = load_dataset(_need(args.dataset, "dataset"))
    _write_stats(out, ds, args.metric)
    return {}


def cmd_train_ae(args, cfg, out: Path) -> dict:
    from . import plots

    ds = load_dataset(_need(args.dataset, "dataset"))
    spec, tcfg = C.ae_from(cfg, ds.header["d"], args.seed)
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    scene_split = {}
    for p, s in zip(ds.plans, ds.plan_split):
        scene_split[p.scene_id] = s
    is_test = np.array([scene_split.get(int(i), TRAIN) == TEST for i in ds.scene_ids])
    bounds = ds.scenes[0].bounds
    model, losses = train_autoencoder(ds.clouds[~is_test], spec, bounds, tcfg, out / "ae_loss.csv")
    model.save(out / "ae.kdnp")
    diag2 = float(((bounds[1] - bounds[0]) ** 2).sum())
    with open(out / "ae_eval.csv", "w") as fh:
        fh.write("split,clouds,chamfer_mean_m2,workspace_diag2_m2,ratio\n")
        for name, mask in (("train", ~is_test), ("test", is_test)):
            if mask.any():
                cm = chamfer_meters(model, ds.clouds[mask])
                fh.write(f"{name},{int(mask.sum())},{cm.mean():.8f},{diag2:.6f},{cm.mean() / diag2:.8f}\n")
    held = ds.clouds[is_test][0] if is_test.any() else ds.clouds[0]
    rec = model.reconstruct(held)
    write_reconstruction_csv(out / "reconstruction.csv", held, rec)
    plots.cloud_reconstruction(out / "reconstruction.svg", held, rec)
    if losses:
        plots.loss_curve(out / "ae_loss.svg", losses, "chamfer")
    return {"final_loss": losses[-1] if losses else None}


def cmd_train_diffusion(args, cfg, out: Path) -> dict:
    from . import plots

    ds = load_dataset(_need(args.dataset, "dataset"))
    rep = REPRESENTATIONS[args.representation]
    if rep != ds.header["representation"] or bool(args.refined) != bool(ds.header["refined"]):
        ds = rederive(ds, rep, args.refined)
    D, H = ds.header["D"], ds.header["horizon"]
    embeddings = None
    E = 0
    if not args.ablation:
        if not args.ae:
            raise ConfigMismatch("full model needs --ae (or pass --ablation to drop the point cloud)")
        ae = _load_ae(args.ae)
        E = ae.spec.embed_dim
        embs = ae.encode_batch(ds.clouds)
        embeddings = {int(s): e for s, e in zip(ds.scene_ids, embs)}
    spec, tcfg = C.denoiser_from(cfg, D, H, 2 * D + E, args.seed)
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    if args.lr is not None:
        tcfg.lr = args.lr
    if args.max_steps is not None:
        tcfg.max_steps = args.max_steps
    sched = make_schedule(cfg["diffusion"]["T"], cfg["diffusion"]["schedule"])
    t0 = time.perf_counter()
    model, losses = train_diffusion(
        ds.samples, spec, sched, ds.normalizer, tcfg, embeddings, out / "loss.csv", rep
    )
    log.info("trained on %d samples in %.1fs", len(ds.samples), time.perf_counter() - t0)
    model.save(out / "model.kdnp")
    if losses:
        plots.loss_curve(out / "loss.svg", losses, "noise MSE")
    return {"samples": len(ds.samples), "sample_info": ds.header.get("sample_info", {})}


def _make_stub(name: str, horizon: int):
    return {"straight": StraightLineStub, "midpoint": MidpointStub}[name](horizon)


def cmd_plan(args, cfg, out: Path) -> dict:
    ds = None
    if args.empty_scene:
        tasks = empty_scene_tasks(cfg, args.n_tasks, args.seed)
    else:
        ds = load_dataset(_need(args.dataset, "dataset"))
        tasks = dataset_tasks(ds, args.n_tasks)
    if args.stub:
        stub = _make_stub(args.stub, cfg["dataset"]["horizon"])
        factory = lambda task: stub  # noqa: E731
        name = f"stub_{args.stub}"
    else:
        model = DiffusionModel.load(_need(args.model, "model checkpoint"))
        ae = _load_ae(args.ae) if args.ae else None
        _check_model(model, ds, ae)
        if model.uses_cloud and ds is None:
            raise ConfigMismatch("a point-cloud model needs dataset scenes; drop --empty-scene")
        factory = _diffusion_factory(model, ds, ae, cfg["planner"]["init"])
        name = args.name or Path(args.model).stem
    rows, timing = run_tasks(factory, tasks, cfg, args, out, args.dump_candidates)
    rep = _write_eval(out, name, rows, timing, reference_only=not args.empty_scene)
    M.write_rows(out / "metrics.csv", M.METRIC_FIELDS, [rep.metrics_row()])
    _write_timing_summary(out / "timing.csv", [rep])
    return {"success_all": rep.success_all}


def cmd_evaluate(args, cfg, out: Path) -> dict:
    from . import plots

    ds = load_dataset(_need(args.dataset, "dataset"))
    tasks = dataset_tasks(ds, args.max_tasks)
    ae = _load_ae(args.ae) if args.ae else None
    reports = []
    for spec_str in args.model:
        name, _, path = spec_str.partition("=")
        if not path:
            name, path = Path(spec_str).parent.name or Path(spec_str).stem, spec_str
        model = DiffusionModel.load(_need(path, "model checkpoint"))
        _check_model(model, ds, ae)
        t0 = time.perf_counter()
        rows, timing = run_tasks(_diffusion_factory(model, ds, ae, cfg["planner"]["init"]), tasks, cfg, args)
        log.info("%s: %d tasks in %.1fs", name, len(tasks), time.perf_counter() - t0)
        reports.append(_write_eval(out, name, rows, timing))
    M.write_rows(out / "metrics.csv", M.METRIC_FIELDS, [r.metrics_row() for r in reports])
    _write_timing_summary(out / "timing.csv", reports)
    plots.in_batch_histograms(out / "in_batch.svg", {r.model: r.in_batch_histogram for r in reports})
    return {"models": [r.model for r in reports]}


def cmd_baseline_oracle(args, cfg, out: Path) -> dict:
    ds = load_dataset(_need(args.dataset, "dataset"))
    tasks = dataset_tasks(ds, args.max_tasks)
    arm = C.arm_from(cfg)
    budget_s = args.oracle_budget_s or cfg["dataset"]["budget_s"]
    oracle_rows, oracle_time = [], {}
    from .oracle import OracleParams

    params = OracleParams(**cfg["oracle"])
    for task in tasks:
        rng = np.random.default_rng([args.seed, task.task_id])
        t0 = time.perf_counter()
        try:
            p = plan_oracle(arm, task.scene, task.start, task.goal, PlannerBudget(wall_clock_seconds=budget_s), rng, params, task.scene_id)
            ok, arc = 1, p.arc_length
        except (NoPlanFound, ValueError):
            ok, arc = 0, float("nan")
        dt = time.perf_counter() - t0
        oracle_time[task.task_id] = dt
        oracle_rows.append({"task_id": task.task_id, "success": ok, "time_s": f"{dt:.6f}", "arc_length": M._fmt(arc)})
    M.write_rows(out / "oracle_per_task.csv", ["task_id", "success", "time_s", "arc_length"], oracle_rows)
    lines = ["model,tasks,oracle_budget_s,neural_mean_s,inference_mean_s,collision_mean_s,ratio_vs_budget,"
             "oracle_measured_mean_s,ratio_vs_measured"]
    for spec_str in args.neural or []:
        name, _, path = spec_str.partition("=")
        if not path:
            name, path = Path(spec_str).stem.replace("timing_", ""), spec_str
        neural = {int(r["task_id"]): r for r in M.read_rows(_need(path, "neural timing CSV"))}
        vs_budget = M.compare_runtime(neural, budget_s)
        vs_meas = M.compare_runtime(neural, {i: oracle_time[i] for i in neural if i in oracle_time}
                                    if set(neural) <= set(oracle_time) else oracle_time)
        M.write_rows(
            out / f"runtime_{name}.csv",
            ["task_id", "oracle_s", "neural_s", "inference_s", "collision_s", "ratio"],
            [{k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()} for r in vs_budget.per_task],
        )
        lines.append(
            f"{name},{len(neural)},{budget_s:.3f},{vs_budget.neural_mean:.6f},{vs_budget.inference_mean:.6f},"
            f"{vs_budget.collision_mean:.6f},{vs_budget.ratio:.6f},{vs_meas.oracle_total / len(neural):.6f},"
            f"{vs_meas.ratio:.6f}"
        )
    (out / "runtime.csv").write_text("\n".join(lines) + "\n")
    return {"oracle_success": float(np.mean([r["success"] for r in oracle_rows]))}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON overlay on the mode preset")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--mode", choices=sorted(C.PRESETS), default="desk")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="keydiff", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", parents=[common], help="sample scenes to JSON lines")
    p.add_argument("--n-scenes", type=int)

    p = sub.add_parser("gen-dataset", parents=[common], help="scenes, clouds and oracle plans")
    p.add_argument("--n-scenes", type=int)
    p.add_argument("--plans-per-scene", type=int)
    p.add_argument("--oracle-budget-s", type=float)
    p.add_argument("--representation", choices=sorted(REPRESENTATIONS), default="keypoint")
    p.add_argument("--refined", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--from-dataset", help="reuse scenes and oracle plans of an existing dataset")

    p = sub.add_parser("stats", parents=[common], help="arc-length statistics per split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--metric", choices=["l2", "l1"], default="l2")

    p = sub.add_parser("train-ae", parents=[common], help="train the point-cloud autoencoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-diffusion", parents=[common], help="train a denoiser")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ae", help="autoencoder checkpoint (full model)")
    p.add_argument("--ablation", action="store_true", help="condition on start and goal only")
    p.add_argument("--representation", choices=sorted(REPRESENTATIONS), default="keypoint")
    p.add_argument("--refined", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("plan", parents=[common], help="batched planning on a task list")
    p.add_argument("--model")
    p.add_argument("--stub", choices=["straight", "midpoint"])
    p.add_argument("--name")
    p.add_argument("--ae")
    p.add_argument("--dataset")
    p.add_argument("--empty-scene", action="store_true")
    p.add_argument("--n-tasks", type=int)
    p.add_argument("--batch-k", type=int)
    p.add_argument("--dump-candidates", type=int, default=3)

    p = sub.add_parser("evaluate", parents=[common], help="held-out evaluation of one or more models")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", action="append", required=True, help="NAME=PATH, repeatable")
    p.add_argument("--ae")
    p.add_argument("--batch-k", type=int)
    p.add_argument("--max-tasks", type=int)

    p = sub.add_parser("baseline-oracle", parents=[common], help="oracle runtime on the evaluation tasks")
    p.add_argument("--dataset", required=True)
    p.add_argument("--oracle-budget-s", type=float)
    p.add_argument("--neural", action="append", help="NAME=timing CSV from evaluate, repeatable")
    p.add_argument("--max-tasks", type=int)

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return ap


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "gen-dataset": cmd_gen_dataset,
    "stats": cmd_stats,
    "train-ae": cmd_train_ae,
    "train-diffusion": cmd_train_diffusion,
    "plan": cmd_plan,
    "evaluate": cmd_evaluate,
    "baseline-oracle": cmd_baseline_oracle,
}


def _replace_out(argv: list[str], out: str) -> list[str]:
    res, skip = [], False
    for i, a in enumerate(argv):
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        res.append(a)
    return res + ["--out", out]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "rerun":
        manifest = json.loads(_need(args.manifest, "manifest").read_text())
        return main(_replace_out(manifest["argv"], args.out))
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if args.command == "plan" and not (args.model or args.stub):
        ap.error("plan needs --model or --stub")
    if args.command == "plan" and not (args.dataset or args.empty_scene):
        ap.error("plan needs --dataset or --empty-scene")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        cfg = C.load_config(args.config, args.mode)
        extra = COMMANDS[args.command](args, cfg, out)
    except (ConfigMismatch, EmptyDataset, FileNotFoundError, SamplingExhausted, ValueError) as e:
        err = {"error": type(e).__name__, "message": str(e), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 2
    # wall time is kept out of the hashed outputs so reruns still compare byte-for-byte
    write_manifest(out, args, cfg, argv, {"result": extra, "wall_s": round(time.perf_counter() - t0, 3)})
    return 0


if __name__ == "__main__":
    sys.exit(main())
