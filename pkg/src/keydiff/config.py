"""Desk / paper presets and JSON config overlays."""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path

from .arm import ArmSpec
from .cloud_ae import AETrainConfig, AutoencoderSpec
from .dataset import DatasetConfig
from .diffusion.model import TrainConfig
from .diffusion.unet import DenoiserSpec
from .oracle import OracleParams
from .scene import SceneParams

DESK = {
    "arm": ArmSpec().to_json(),
    "scene": {
        "n_obstacles": [3, 4],
        "size_range": [0.05, 0.25],
        "min_spacing": 0.30,
        "bounds": [[-1.5, -1.5], [1.5, 1.5]],
        "anchor": [0.0, 0.0],
        "anchor_clearance": 0.5,
        "anchor_max_distance": 1.1,
        "max_attempts": 100000,
    },
    "dataset": {
        "n_scenes": 500,
        "plans_per_scene": 10,
        "budget_s": 5.0,
        "cloud_points": 1024,
        "test_fraction": 0.1,
        "step": 0.1,
        "eps": None,
        "norm": "linf",
        "horizon": 16,
        "min_keypoints": 5,
        "attempts_factor": 2.0,
    },
    "oracle": {"step": 0.1, "goal_bias": 0.1, "resolution": 0.01, "shortcut_rounds": 200},
    "ae": {
        "spec": {"widths": [32, 64, 64], "decoder_widths": [256, 256], "n_out": 256},
        "train": {"epochs": 100, "batch": 16, "lr": 1e-3, "target_points": 512},
    },
    "diffusion": {
        "spec": {"widths": [64, 128], "groups": 8, "time_dim": 64, "kernel": 3},
        "train": {"epochs": 50, "batch": 64, "lr": 1e-3, "ema_decay": 0.995, "dtype": "float32"},
        "T": 100,
        "schedule": "squared_cosine",
    },
    "planner": {
        "K": 32,
        "goal_tol": 0.05,
        "max_rounds": 4,
        "interp_step": 0.05,
        "collision_resolution": 0.01,
        "init": "gaussian",
    },
}

# Full-scale preset ("paper" mode): 8-DOF spatial arm, 3D boxes, 4096-point clouds. Not run at desk scale.
PAPER = copy.deepcopy(DESK)
PAPER["arm"] = ArmSpec(
    dof=8,
    link_lengths=(0.12, 0.12, 0.2, 0.05, 0.2, 0.05, 0.1, 0.1),
    link_radius=0.04,
    joint_limits=((-math.pi, math.pi),) + ((-2.6, 2.6),) * 7,
    base_position=(0.0, 0.0, 0.0),
).to_json()
PAPER["scene"].update(bounds=[[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]], anchor=[0.0, 0.0, 0.0], anchor_clearance=0.2,
                      anchor_max_distance=0.9)
PAPER["dataset"].update(n_scenes=5000, plans_per_scene=20, budget_s=20.0, cloud_points=4096)
PAPER["ae"]["spec"].update(widths=[64, 128, 256])
PAPER["diffusion"]["spec"].update(widths=[64, 128, 256], kernel=5)
PAPER["diffusion"]["train"].update(lr=1e-4, dtype="float64")

PRESETS = {"desk": DESK, "paper": PAPER}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, mode: str = "desk") -> dict:
    if mode not in PRESETS:
        raise ValueError(f"unknown mode {mode!r}")
    cfg = copy.deepcopy(PRESETS[mode])
    if path:
        cfg = deep_merge(cfg, json.loads(Path(path).read_text()))
    return cfg


def arm_from(cfg: dict) -> ArmSpec:
    return ArmSpec.from_json(cfg["arm"])


def scene_params_from(cfg: dict) -> SceneParams:
    sc = dict(cfg["scene"])
    sc["bounds"] = tuple(tuple(b) for b in sc["bounds"])
    sc["n_obstacles"] = tuple(sc["n_obstacles"])
    sc["size_range"] = tuple(sc["size_range"])
    if sc.get("anchor") is not None:
        sc["anchor"] = tuple(sc["anchor"])
    if sc.get("anchor_max_distance") is None:
        sc["anchor_max_distance"] = math.inf
    return SceneParams(**sc)


def dataset_config_from(cfg: dict, seed: int, representation: str = "keypoint", refined: bool = False) -> DatasetConfig:
    return DatasetConfig(
        **cfg["dataset"],
        seed=seed,
        representation=representation,
        refined=refined,
        arm=arm_from(cfg),
        scene=scene_params_from(cfg),
        oracle=OracleParams(**cfg["oracle"]),
    )


def ae_from(cfg: dict, dim: int, seed: int) -> tuple[AutoencoderSpec, AETrainConfig]:
    return AutoencoderSpec(dim=dim, **cfg["ae"]["spec"]), AETrainConfig(**cfg["ae"]["train"], seed=seed)


def denoiser_from(cfg: dict, D: int, horizon: int, cond_dim: int, seed: int) -> tuple[DenoiserSpec, TrainConfig]:
    spec = DenoiserSpec(action_dim=D, horizon=horizon, cond_dim=cond_dim, **cfg["diffusion"]["spec"])
    return spec, TrainConfig(**cfg["diffusion"]["train"], seed=seed)
