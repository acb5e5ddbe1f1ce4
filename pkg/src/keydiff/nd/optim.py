from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    ema_decay: float = 0.995


class ParamStore:
    """Ordered named parameters with Adam moments and an EMA shadow copy."""

    def __init__(self, dtype=np.float64):
        self.dtype = dtype
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.ema: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=self.dtype)
        t = Tensor(arr, requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        self.ema[name] = arr.copy()
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def arrays(self, use_ema: bool = False) -> "OrderedDict[str, np.ndarray]":
        src = self.ema if use_ema else {k: t.data for k, t in self.params.items()}
        return OrderedDict((k, src[k]) for k in self.params)

    def n_values(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def named_grads(self, grads: dict[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
        """Re-key a ``backward`` result by parameter name (missing → zeros)."""
        out = {}
        for name, t in self.params.items():
            g = grads.get(t)
            out[name] = np.zeros_like(t.data) if g is None else g
        return out

    def load(self, arrays: dict[str, np.ndarray], ema: bool = True) -> None:
        for name, t in self.params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r} in checkpoint")
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.copy()
            if ema:
                self.ema[name] = arr.copy()


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], cfg: AdamConfig | None = None) -> ParamStore:
    """One Adam update (bias corrected) followed by the EMA shadow update."""
    cfg = cfg or AdamConfig()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r} at step {store.step}")
        if g.shape != store.params[name].shape:
            raise ValueError(f"{name}: grad shape {g.shape} != {store.params[name].shape}")
    b1, b2 = cfg.betas
    store.step += 1
    c1 = 1.0 - b1**store.step
    c2 = 1.0 - b2**store.step
    for name, t in store.params.items():
        g = grads.get(name)
        if g is not None:
            m = store.m[name]
            v = store.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data = t.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        e = store.ema[name]
        e *= cfg.ema_decay
        e += (1.0 - cfg.ema_decay) * t.data
    return store
