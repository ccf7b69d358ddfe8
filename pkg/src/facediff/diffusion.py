"""Variance schedules and the closed-form noising / x0-parameterised reverse step.

Steps are indexed ``1..T``; ``alpha_bars[0] == 1`` is a sentinel, which
makes the last reverse step (``t == 1``) deterministic.

The step functions only use arithmetic and broadcasting, so they accept
numpy arrays and torch tensors alike. ``t`` may be an int or a vector of
per-sample steps matching the leading (batch) axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("cosine", "linear")
COSINE_OFFSET = 0.008
MIN_ALPHA = 0.001
LINEAR_BETA = (1e-4, 2e-2)


@dataclass(frozen=True)
class DiffusionSchedule:
    kind: str
    T: int
    alphas: np.ndarray  # (T,), alphas[t-1] is alpha_t
    alpha_bars: np.ndarray  # (T+1,), alpha_bars[0] == 1

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])


def make_schedule(kind: str = "cosine", T: int = 500) -> DiffusionSchedule:
    if int(T) < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    T = int(T)
    if kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        ab = f / f[0]
        alphas = np.clip(ab[1:] / ab[:-1], MIN_ALPHA, 1.0)
    elif kind == "linear":
        alphas = 1.0 - np.linspace(LINEAR_BETA[0], LINEAR_BETA[1], T)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return DiffusionSchedule(kind=kind, T=T, alphas=alphas, alpha_bars=alpha_bars)


def _coef(values: np.ndarray, t, like):
    """Gather ``values[t]`` and shape it to broadcast against ``like``."""
    if np.ndim(t) == 0:
        return float(values[int(t)])
    idx = np.asarray(t.tolist() if hasattr(t, "tolist") else t, dtype=np.int64)
    c = values[idx].reshape((-1,) + (1,) * (like.ndim - 1))
    if hasattr(like, "new_tensor"):  # torch
        return like.new_tensor(c)
    return c


def _check_step(t, lo: int, hi: int) -> None:
    arr = np.asarray(t.tolist() if hasattr(t, "tolist") else t)
    if arr.size == 0 or arr.min() < lo or arr.max() > hi:
        raise ValueError(f"diffusion step {t} outside [{lo}, {hi}]")


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0, t, noise, schedule: DiffusionSchedule):
    """Draw ``X_t ~ q(X_t | X_0)`` given externally sampled unit noise."""
    _check_step(t, 1, schedule.T)
    _check_shapes(x0, noise)
    ab = _coef(schedule.alpha_bars, t, x0)
    return ab ** 0.5 * x0 + (1.0 - ab) ** 0.5 * noise


def q_step(x_prev, t, noise, schedule: DiffusionSchedule):
    """One Markov noising step ``q(x_t | x_{t-1})``."""
    _check_step(t, 1, schedule.T)
    _check_shapes(x_prev, noise)
    a = _coef(np.concatenate([[1.0], schedule.alphas]), t, x_prev)
    return a ** 0.5 * x_prev + (1.0 - a) ** 0.5 * noise


def ddpm_step(x_hat0, t, noise, schedule: DiffusionSchedule):
    """Sample ``X_{t-1}`` from N(sqrt(ab_{t-1}) x_hat0, (1 - ab_{t-1}) I).

    At ``t == 1`` the variance is zero and ``x_hat0`` comes back unchanged.
    """
    _check_step(t, 1, schedule.T)
    _check_shapes(x_hat0, noise)
    ab = _coef(schedule.alpha_bars, np.asarray(t) - 1 if np.ndim(t) else int(t) - 1, x_hat0)
    return ab ** 0.5 * x_hat0 + (1.0 - ab) ** 0.5 * noise
