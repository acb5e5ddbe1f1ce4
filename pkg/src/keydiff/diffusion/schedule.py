from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "squared_cosine"

    @property
    def T(self) -> int:
        return len(self.betas)


def _cosine_alpha_bar(u: float, s: float = 0.008) -> float:
    return math.cos((u + s) / (1.0 + s) * math.pi / 2.0) ** 2


def make_schedule(T: int = 100, kind: str = "squared_cosine", max_beta: float = 0.999) -> DiffusionSchedule:
    """Noise schedule with ``T`` steps.

    ``squared_cosine`` discretises alpha_bar(u) = cos^2(((u + s) / (1 + s)) * pi / 2)
    so that beta_t = 1 - alpha_bar((t+1)/T) / alpha_bar(t/T), capped at ``max_beta``.
    ``linear`` uses the DDPM betas 1e-4 .. 0.02 rescaled to ``T`` steps.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if kind == "squared_cosine":
        betas = np.array(
            [min(1.0 - _cosine_alpha_bar((t + 1) / T) / _cosine_alpha_bar(t / T), max_beta) for t in range(T)]
        )
    elif kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, scale * 0.02, T)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas), kind=kind)


def q_sample(schedule: DiffusionSchedule, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    """Forward process: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise, ``t`` scalar or per-row."""
    ab = schedule.alpha_bars[np.asarray(t)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def posterior_coefficients(schedule: DiffusionSchedule, t: int) -> tuple[float, float, float]:
    """(coef on x0, coef on x_t, variance) of q(x_{t-1} | x_t, x0)."""
    ab = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t - 1] if t > 0 else 1.0
    beta = schedule.betas[t]
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = math.sqrt(schedule.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab)
    var = (1.0 - ab_prev) / (1.0 - ab) * beta
    return c0, ct, var


def reverse_step(
    schedule: DiffusionSchedule,
    x_t: np.ndarray,
    t: int,
    eps_pred: np.ndarray,
    noise: np.ndarray | None,
    clip_sample: bool = True,
) -> np.ndarray:
    """One DDPM ancestral step x_t -> x_{t-1} given the predicted noise."""
    ab = schedule.alpha_bars[t]
    x0 = (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)
    if clip_sample:
        x0 = np.clip(x0, -1.0, 1.0)
    c0, ct, var = posterior_coefficients(schedule, t)
    mean = c0 * x0 + ct * x_t
    if t > 0 and noise is not None:
        mean = mean + math.sqrt(max(var, 1e-20)) * noise
    return mean
