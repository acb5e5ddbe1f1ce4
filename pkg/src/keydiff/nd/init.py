"""Parameter initialisers (uniform fan-in scaling, as in common deep learning defaults)."""
from __future__ import annotations

import numpy as np

from .optim import ParamStore


def add_linear(store: ParamStore, prefix: str, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
    bound = 1.0 / np.sqrt(n_in)
    if zero:
        w = np.zeros((n_in, n_out))
        b = np.zeros(n_out)
    else:
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        b = rng.uniform(-bound, bound, size=n_out)
    store.add(f"{prefix}.w", w)
    store.add(f"{prefix}.b", b)


def add_conv(store: ParamStore, prefix: str, c_in: int, c_out: int, k: int, rng: np.random.Generator):
    bound = 1.0 / np.sqrt(c_in * k)
    store.add(f"{prefix}.w", rng.uniform(-bound, bound, size=(k, c_in, c_out)))
    store.add(f"{prefix}.b", rng.uniform(-bound, bound, size=c_out))


def add_norm(store: ParamStore, prefix: str, c: int):
    store.add(f"{prefix}.g", np.ones(c))
    store.add(f"{prefix}.b", np.zeros(c))
