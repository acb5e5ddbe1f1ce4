"""PointNet-style point-cloud autoencoder trained on the Chamfer distance.

The encoder applies the same small MLP to every point (a kernel-1 convolution)
and max-pools over points, so the embedding ignores point order exactly.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import nd
from .nd import Tensor
from .nd.init import add_linear

log = logging.getLogger(__name__)


@dataclass
class AutoencoderSpec:
    dim: int = 2
    widths: tuple[int, int, int] = (32, 64, 64)
    decoder_widths: tuple[int, ...] = (256, 256)
    n_out: int = 256

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ValueError("encoder needs three positive widths")
        if self.n_out < 1:
            raise ValueError("n_out must be >= 1")

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AutoencoderSpec":
        return cls(**dict(d))


def init_autoencoder(spec: AutoencoderSpec, rng: np.random.Generator, dtype=np.float64) -> nd.ParamStore:
    store = nd.ParamStore(dtype)
    dims = [spec.dim, *spec.widths]
    for i in range(3):
        add_linear(store, f"enc.{i}", dims[i], dims[i + 1], rng)
    dims = [spec.embed_dim, *spec.decoder_widths, spec.n_out * spec.dim]
    for i in range(len(dims) - 1):
        add_linear(store, f"dec.{i}", dims[i], dims[i + 1], rng)
    return store


def encoder_forward(p: Mapping[str, Tensor], cloud) -> Tensor:
    """``(B, P, d)`` normalized points to ``(B, E)`` embeddings."""
    h = nd.as_tensor(cloud)
    for i in range(3):
        h = nd.linear(h, p[f"enc.{i}.w"], p[f"enc.{i}.b"])
        if i < 2:
            h = nd.relu(h)
    return nd.max_pool(h, axis=1)


def decoder_forward(p: Mapping[str, Tensor], spec: AutoencoderSpec, z) -> Tensor:
    h = nd.as_tensor(z)
    n = len(spec.decoder_widths) + 1
    for i in range(n):
        h = nd.linear(h, p[f"dec.{i}.w"], p[f"dec.{i}.b"])
        if i < n - 1:
            h = nd.relu(h)
    return nd.reshape(h, (h.shape[0], spec.n_out, spec.dim))


def chamfer(a, b) -> Tensor:
    """Mean squared nearest distance a->b plus b->a, averaged over the batch.

    Accepts ``(P, d)`` / ``(Q, d)`` or batched ``(B, P, d)`` / ``(B, Q, d)``.
    """
    a, b = nd.as_tensor(a), nd.as_tensor(b)
    if a.ndim == 2:
        a = nd.reshape(a, (1, *a.shape))
    if b.ndim == 2:
        b = nd.reshape(b, (1, *b.shape))
    d2 = nd.sq_dist_matrix(a, b)
    return nd.add(nd.mean(nd.min_reduce(d2, axis=2)), nd.mean(nd.min_reduce(d2, axis=1)))


def chamfer_np(a: np.ndarray, b: np.ndarray) -> float:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


class Autoencoder:
    """Frozen autoencoder for inference."""

    def __init__(self, spec: AutoencoderSpec, arrays: Mapping[str, np.ndarray], bounds: np.ndarray):
        self.spec = spec
        self.bounds = np.asarray(bounds, dtype=float)
        self.p = {k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in arrays.items()}

    def normalize(self, cloud: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds
        return 2.0 * (np.asarray(cloud) - lo) / (hi - lo) - 1.0

    def denormalize(self, pts: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds
        return (np.asarray(pts) + 1.0) * 0.5 * (hi - lo) + lo

    def encode(self, cloud: np.ndarray) -> np.ndarray:
        """Embedding of one ``(P, d)`` cloud given in workspace meters."""
        return self.encode_batch(np.asarray(cloud)[None])[0]

    def encode_batch(self, clouds: np.ndarray) -> np.ndarray:
        return encoder_forward(self.p, self.normalize(clouds)).data

    def reconstruct(self, cloud: np.ndarray) -> np.ndarray:
        """Decoded cloud in workspace meters."""
        z = encoder_forward(self.p, self.normalize(np.asarray(cloud)[None]))
        return self.denormalize(decoder_forward(self.p, self.spec, z).data[0])

    def save(self, ckpt_path, sidecar_path=None) -> None:
        nd.save_arrays(ckpt_path, {k: v.data for k, v in self.p.items()})
        sidecar_path = sidecar_path or Path(str(ckpt_path) + ".json")
        Path(sidecar_path).write_text(
            json.dumps({"spec": self.spec.to_dict(), "bounds": self.bounds.tolist()}, indent=2, sort_keys=True)
        )

    @classmethod
    def load(cls, ckpt_path, sidecar_path=None) -> "Autoencoder":
        sidecar_path = sidecar_path or Path(str(ckpt_path) + ".json")
        meta = json.loads(Path(sidecar_path).read_text())
        return cls(AutoencoderSpec.from_dict(meta["spec"]), nd.load_arrays(ckpt_path), np.asarray(meta["bounds"]))


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class AETrainConfig:
    epochs: int = 200
    batch: int = 16
    lr: float = 1e-3
    seed: int = 0
    # target points per cloud per step (subsampled each step; None keeps all)
    target_points: int | None = 512


def train_autoencoder(
    clouds: np.ndarray,
    spec: AutoencoderSpec,
    bounds: np.ndarray,
    cfg: AETrainConfig | None = None,
    loss_csv=None,
) -> tuple[Autoencoder, list[float]]:
    """Fit the autoencoder on ``(N, P, d)`` clouds in workspace meters.

    Returns the trained model and the mean training loss per epoch.
    """
    cfg = cfg or AETrainConfig()
    clouds = np.asarray(clouds, dtype=np.float64)
    if clouds.ndim != 3 or len(clouds) == 0:
        raise ValueError("need a non-empty (N, P, d) array of clouds")
    rng = np.random.default_rng(cfg.seed)
    store = init_autoencoder(spec, rng, np.float32)
    lo, hi = np.asarray(bounds, dtype=float)
    x_all = (2.0 * (clouds - lo) / (hi - lo) - 1.0).astype(np.float32)
    opt = nd.AdamConfig(lr=cfg.lr, ema_decay=0.0)
    losses: list[float] = []
    fh = open(loss_csv, "w", newline="") if loss_csv else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(["epoch", "loss"])
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(x_all))
            total = 0.0
            for s in range(0, len(order), cfg.batch):
                xb = x_all[order[s : s + cfg.batch]]
                tgt = xb
                if cfg.target_points and cfg.target_points < xb.shape[1]:
                    idx = rng.choice(xb.shape[1], cfg.target_points, replace=False)
                    tgt = xb[:, idx]
                with nd.Tape() as tape:
                    z = encoder_forward(store, xb)
                    loss = chamfer(decoder_forward(store, spec, z), tgt)
                val = float(loss.data)
                if not np.isfinite(val):
                    raise NonFiniteLoss(f"autoencoder loss became {val} at epoch {epoch}")
                grads = store.named_grads(nd.backward(tape, loss))
                nd.adam_step(store, grads, opt)
                total += val * len(xb)
            losses.append(total / len(x_all))
            if writer:
                writer.writerow([epoch, f"{losses[-1]:.8f}"])
            log.info("ae epoch %d loss %.5f", epoch, losses[-1])
    finally:
        if fh:
            fh.close()
    return Autoencoder(spec, store.arrays(), np.asarray(bounds)), losses


def chamfer_meters(model: Autoencoder, clouds: np.ndarray) -> np.ndarray:
    """Per-cloud reconstruction Chamfer distance in squared meters."""
    return np.array([chamfer_np(model.reconstruct(c), c) for c in clouds])


def write_reconstruction_csv(path, original: np.ndarray, recon: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = original.shape[1]
        axes = "xyz"[:d]
        w.writerow(["source", *axes])
        for name, pts in (("input", original), ("reconstruction", recon)):
            for p in pts:
                w.writerow([name, *(f"{v:.6f}" for v in p)])
