"""Conditional temporal UNet that predicts the noise in a ``(B, horizon, D)`` window.

Every residual block is modulated by FiLM: the shared condition (timestep
features concatenated with the global condition) is mapped to a per-channel
scale and shift applied after the block's first convolution.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .. import nd
from ..nd import Tensor
from ..nd.init import add_conv, add_linear, add_norm


class ConditionMismatch(ValueError):
    pass


@dataclass
class DenoiserSpec:
    action_dim: int = 4
    horizon: int = 16
    cond_dim: int = 8
    widths: tuple[int, ...] = (64, 128, 256)
    groups: int = 8
    time_dim: int = 64
    kernel: int = 5

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.horizon % (2 ** (len(self.widths) - 1)):
            raise ValueError(f"horizon {self.horizon} not divisible by 2^{len(self.widths) - 1}")
        for w in self.widths:
            if w % self.groups:
                raise ValueError(f"width {w} not divisible by {self.groups} groups")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DenoiserSpec":
        return cls(**{k: (tuple(v) if k == "widths" else v) for k, v in d.items()})


def _res_block(store, prefix, c_in, c_out, film_dim, k, rng):
    add_conv(store, f"{prefix}.conv0", c_in, c_out, k, rng)
    add_norm(store, f"{prefix}.norm0", c_out)
    add_linear(store, f"{prefix}.film", film_dim, 2 * c_out, rng)
    add_conv(store, f"{prefix}.conv1", c_out, c_out, k, rng)
    add_norm(store, f"{prefix}.norm1", c_out)
    if c_in != c_out:
        add_conv(store, f"{prefix}.skip", c_in, c_out, 1, rng)


def _plan(spec: DenoiserSpec):
    dims = [spec.action_dim, *spec.widths]
    in_out = list(zip(dims[:-1], dims[1:]))
    return in_out


def init_denoiser(spec: DenoiserSpec, rng: np.random.Generator) -> nd.ParamStore:
    store = nd.ParamStore()
    td = spec.time_dim
    add_linear(store, "time.0", td, 4 * td, rng)
    add_linear(store, "time.1", 4 * td, td, rng)
    film_dim = td + spec.cond_dim
    k = spec.kernel
    in_out = _plan(spec)
    n = len(in_out)
    for i, (ci, co) in enumerate(in_out):
        _res_block(store, f"down{i}.res0", ci, co, film_dim, k, rng)
        _res_block(store, f"down{i}.res1", co, co, film_dim, k, rng)
        if i < n - 1:
            add_conv(store, f"down{i}.pool", co, co, 3, rng)
    mid = spec.widths[-1]
    _res_block(store, "mid.res0", mid, mid, film_dim, k, rng)
    _res_block(store, "mid.res1", mid, mid, film_dim, k, rng)
    for i, (ci, co) in enumerate(reversed(in_out[1:])):
        _res_block(store, f"up{i}.res0", 2 * co, ci, film_dim, k, rng)
        _res_block(store, f"up{i}.res1", ci, ci, film_dim, k, rng)
        add_conv(store, f"up{i}.conv", ci, ci, 3, rng)
    w0 = spec.widths[0]
    add_conv(store, "final.conv", w0, w0, k, rng)
    add_norm(store, "final.norm", w0)
    add_conv(store, "final.out", w0, spec.action_dim, 1, rng)
    return store


def timestep_embedding(t: np.ndarray, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal features ``(B, dim)``: [sin(t * f_i), cos(t * f_i)]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(dtype)


def _conv(p, prefix, x, padding):
    return nd.conv1d(x, p[f"{prefix}.w"], p[f"{prefix}.b"], padding=padding)


def _block(p, prefix, x, film_in, groups, k):
    h = _conv(p, f"{prefix}.conv0", x, k // 2)
    h = nd.mish(nd.group_norm(h, groups, p[f"{prefix}.norm0.g"], p[f"{prefix}.norm0.b"]))
    fb = nd.linear(film_in, p[f"{prefix}.film.w"], p[f"{prefix}.film.b"])
    c = h.shape[2]
    B = h.shape[0]
    scale = nd.reshape(nd.take_slice(fb, 0, c, axis=1), (B, 1, c))
    shift = nd.reshape(nd.take_slice(fb, c, 2 * c, axis=1), (B, 1, c))
    h = nd.add(nd.mul(h, scale), shift)
    h = _conv(p, f"{prefix}.conv1", h, k // 2)
    h = nd.mish(nd.group_norm(h, groups, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"]))
    res = _conv(p, f"{prefix}.skip", x, 0) if f"{prefix}.skip.w" in p else x
    return nd.add(h, res)


def denoiser_forward(p: Mapping[str, Tensor], spec: DenoiserSpec, x_t, t, cond) -> Tensor:
    """Predict noise for ``x_t`` ``(B, horizon, D)`` at steps ``t`` ``(B,)`` under ``cond`` ``(B, C)``."""
    x_t = nd.as_tensor(x_t)
    cond = nd.as_tensor(cond)
    if x_t.ndim != 3 or x_t.shape[1:] != (spec.horizon, spec.action_dim):
        raise nd.ShapeError("denoiser_forward(x_t)", x_t.shape, (spec.horizon, spec.action_dim))
    if cond.ndim != 2 or cond.shape[1] != spec.cond_dim:
        raise ConditionMismatch(f"condition dim {cond.shape[-1]} != trained cond_dim {spec.cond_dim}")
    B = x_t.shape[0]
    if cond.shape[0] != B:
        raise nd.ShapeError("denoiser_forward(cond)", x_t.shape, cond.shape)
    dtype = x_t.dtype
    t = np.broadcast_to(np.asarray(t), (B,))
    temb = nd.Tensor(timestep_embedding(t, spec.time_dim, dtype))
    tf = nd.mish(nd.linear(temb, p["time.0.w"], p["time.0.b"]))
    tf = nd.linear(tf, p["time.1.w"], p["time.1.b"])
    film_in = nd.mish(nd.concat([tf, cond], axis=1))

    g, k = spec.groups, spec.kernel
    n = len(spec.widths)
    x = x_t
    skips = []
    for i in range(n):
        x = _block(p, f"down{i}.res0", x, film_in, g, k)
        x = _block(p, f"down{i}.res1", x, film_in, g, k)
        skips.append(x)
        if i < n - 1:
            x = nd.conv1d(x, p[f"down{i}.pool.w"], p[f"down{i}.pool.b"], stride=2, padding=1)
    x = _block(p, "mid.res0", x, film_in, g, k)
    x = _block(p, "mid.res1", x, film_in, g, k)
    for i in range(n - 1):
        x = nd.concat([x, skips.pop()], axis=2)
        x = _block(p, f"up{i}.res0", x, film_in, g, k)
        x = _block(p, f"up{i}.res1", x, film_in, g, k)
        x = _conv(p, f"up{i}.conv", nd.upsample(x, 2), 1)
    x = _conv(p, "final.conv", x, k // 2)
    x = nd.mish(nd.group_norm(x, g, p["final.norm.g"], p["final.norm.b"]))
    return _conv(p, "final.out", x, 0)


def frozen_params(arrays: Mapping[str, np.ndarray], dtype=np.float32) -> dict[str, Tensor]:
    """Wrap plain arrays as non-differentiable tensors for inference."""
    return {k: Tensor(np.asarray(v, dtype=dtype)) for k, v in arrays.items()}
