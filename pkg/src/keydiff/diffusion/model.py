"""Training loop, checkpointing and conditional sampling for the denoiser."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .. import nd
from ..plans import Normalizer, SampleArrays
from .schedule import DiffusionSchedule, make_schedule, q_sample, reverse_step
from .unet import ConditionMismatch, DenoiserSpec, denoiser_forward, frozen_params, init_denoiser

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch: int = 64
    lr: float = 1e-4
    ema_decay: float = 0.995
    seed: int = 0
    # float32 keeps desk-scale training affordable; gradient checks run in float64
    dtype: str = "float32"
    # optional hard cap on optimizer steps (overrides epochs when reached)
    max_steps: int | None = None


def build_conditions(samples: SampleArrays, embeddings: Mapping[int, np.ndarray] | None = None) -> np.ndarray:
    """Rows ``start ⊕ goal`` or ``start ⊕ goal ⊕ embedding[scene_id]``."""
    parts = [samples.start, samples.goal]
    if embeddings is not None:
        parts.append(np.stack([embeddings[int(s)] for s in samples.scene_id]) if len(samples) else np.zeros((0, 0)))
    return np.concatenate(parts, axis=1)


@dataclass
class DiffusionModel:
    spec: DenoiserSpec
    schedule: DiffusionSchedule
    arrays: dict  # name -> array (EMA weights)
    normalizer: Normalizer
    ablation: bool
    representation: str = "keypoint"
    embed_dim: int = 0

    def __post_init__(self):
        self._params = frozen_params(self.arrays, np.float32)

    @property
    def cond_dim(self) -> int:
        return self.spec.cond_dim

    @property
    def uses_cloud(self) -> bool:
        return not self.ablation

    def condition(self, start, goal, embedding=None) -> np.ndarray:
        """Normalized condition vector for joint-space ``start`` / ``goal``."""
        parts = [self.normalizer.normalize(start), self.normalizer.normalize(goal)]
        if self.uses_cloud:
            if embedding is None:
                raise ConditionMismatch(f"model expects a {self.embed_dim}-dim cloud embedding")
            parts.append(np.asarray(embedding, dtype=float))
        c = np.concatenate(parts)
        if len(c) != self.cond_dim:
            raise ConditionMismatch(f"condition dim {len(c)} != trained cond_dim {self.cond_dim}")
        return c

    def predict_noise(self, x_t: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
        return denoiser_forward(self._params, self.spec, x_t.astype(np.float32), t, cond.astype(np.float32)).data

    def sidecar(self) -> dict:
        return {
            "D": self.spec.action_dim,
            "horizon": self.spec.horizon,
            "T": self.schedule.T,
            "schedule": self.schedule.kind,
            "C": self.spec.cond_dim,
            "E": self.embed_dim,
            "spec": self.spec.to_dict(),
            "ablation": self.ablation,
            "representation": self.representation,
            "normalizer": self.normalizer.to_json(),
        }

    def save(self, ckpt_path) -> None:
        nd.save_arrays(ckpt_path, self.arrays)
        Path(str(ckpt_path) + ".json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, ckpt_path) -> "DiffusionModel":
        meta = json.loads(Path(str(ckpt_path) + ".json").read_text())
        spec = DenoiserSpec.from_dict(meta["spec"])
        return cls(
            spec=spec,
            schedule=make_schedule(meta["T"], meta.get("schedule", "squared_cosine")),
            arrays=dict(nd.load_arrays(ckpt_path)),
            normalizer=Normalizer(meta["normalizer"]["lo"], meta["normalizer"]["hi"]),
            ablation=bool(meta["ablation"]),
            representation=meta.get("representation", "keypoint"),
            embed_dim=int(meta.get("E", 0)),
        )


def train_diffusion(
    samples: SampleArrays,
    spec: DenoiserSpec,
    schedule: DiffusionSchedule,
    normalizer: Normalizer,
    cfg: TrainConfig | None = None,
    embeddings: Mapping[int, np.ndarray] | None = None,
    loss_csv=None,
    representation: str = "keypoint",
) -> tuple[DiffusionModel, list[float]]:
    """Noise-prediction training; ``embeddings=None`` trains the no-cloud ablation."""
    cfg = cfg or TrainConfig()
    if len(samples) == 0:
        raise ValueError("no training samples")
    dtype = np.dtype(cfg.dtype)
    cond = build_conditions(samples, embeddings).astype(dtype)
    if cond.shape[1] != spec.cond_dim:
        raise ConditionMismatch(f"samples give condition dim {cond.shape[1]}, spec expects {spec.cond_dim}")
    target = samples.target.astype(dtype)
    rng = np.random.default_rng(cfg.seed)
    store = init_denoiser(spec, rng)
    if dtype != np.float64:
        store = _cast_store(store, dtype)
    opt = nd.AdamConfig(lr=cfg.lr, ema_decay=cfg.ema_decay)
    T = schedule.T
    losses: list[float] = []
    fh = open(loss_csv, "w", newline="") if loss_csv else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(["epoch", "steps", "loss"])
    steps = 0
    try:
        for epoch in range(cfg.epochs):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            order = rng.permutation(len(target))
            total, seen = 0.0, 0
            for s in range(0, len(order), cfg.batch):
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
                idx = order[s : s + cfg.batch]
                x0 = target[idx]
                t = rng.integers(0, T, size=len(idx))
                noise = rng.standard_normal(x0.shape).astype(dtype)
                x_t = q_sample(schedule, x0, t, noise).astype(dtype)
                with nd.Tape() as tape:
                    pred = denoiser_forward(store, spec, x_t, t, cond[idx])
                    loss = nd.mse(pred, noise)
                val = float(loss.data)
                if not np.isfinite(val):
                    raise NonFiniteLoss(f"diffusion loss became {val} at epoch {epoch}, step {steps}")
                nd.adam_step(store, store.named_grads(nd.backward(tape, loss)), opt)
                steps += 1
                total += val * len(idx)
                seen += len(idx)
            losses.append(total / max(seen, 1))
            if writer:
                writer.writerow([epoch, steps, f"{losses[-1]:.8f}"])
            log.info("diffusion epoch %d steps %d loss %.5f", epoch, steps, losses[-1])
    finally:
        if fh:
            fh.close()
    E = 0 if embeddings is None else spec.cond_dim - 2 * spec.action_dim
    model = DiffusionModel(
        spec, schedule, dict(store.arrays(use_ema=True)), normalizer, embeddings is None, representation, E
    )
    return model, losses


def _cast_store(store: nd.ParamStore, dtype) -> nd.ParamStore:
    out = nd.ParamStore(dtype)
    for name, t in store.params.items():
        out.add(name, t.data)
    return out


def row_generators(seed, rows) -> list[np.random.Generator]:
    """Independent per-row streams; row k's stream depends only on (seed, k)."""
    return [np.random.default_rng([int(seed), int(k)]) for k in rows]


def sample_actions(
    model: DiffusionModel,
    cond: np.ndarray,
    K: int,
    seed: int,
    init: str = "gaussian",
    clip_sample: bool = True,
    rows: Sequence[int] | None = None,
) -> np.ndarray:
    """Draw ``K`` normalized windows ``(K, horizon, D)`` for one condition vector (or ``(K, C)`` rows).

    ``rows`` names the noise stream of each output row (default ``0..K-1``), so a
    candidate keeps its noise when the batch shrinks or grows.
    """
    rows = range(K) if rows is None else rows
    if len(rows) != K:
        raise ValueError("need one row id per sample")
    spec, sched = model.spec, model.schedule
    cond = np.asarray(cond, dtype=np.float32)
    if cond.ndim == 1:
        cond = np.broadcast_to(cond, (K, cond.shape[0]))
    if cond.shape != (K, spec.cond_dim):
        raise ConditionMismatch(f"condition shape {cond.shape} != ({K}, {spec.cond_dim})")
    H, D, T = spec.horizon, spec.action_dim, sched.T
    x = np.empty((K, H, D), dtype=np.float32)
    noise = np.empty((K, T, H, D), dtype=np.float32)
    for k, g in enumerate(row_generators(seed, rows)):
        if init == "gaussian":
            x[k] = g.standard_normal((H, D))
        elif init == "uniform":
            x[k] = g.uniform(-1.0, 1.0, (H, D))
        else:
            raise ValueError(f"unknown init {init!r}")
        noise[k] = g.standard_normal((T, H, D))
    for t in range(T - 1, -1, -1):
        eps = model.predict_noise(x, np.full(K, t), cond)
        x = reverse_step(sched, x, t, eps, noise[:, t], clip_sample).astype(np.float32)
    return np.clip(x, -1.0, 1.0)
