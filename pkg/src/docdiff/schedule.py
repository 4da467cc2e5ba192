"""Noise schedule and the closed-form diffusion algebra.

All cumulative products live in float64; values are cast to float32 only
where they meet image arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor

__all__ = [
    "NoiseSchedule",
    "StepPlan",
    "linear_schedule",
    "q_sample",
    "reverse_step",
    "predict_x0_from_eps",
    "make_step_plan",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step betas, alphas and cumulative alphas indexed by t = 0..T.

    Index 0 is the clean state: beta[0] = 0 and alpha[0] = alpha_bar[0] = 1.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    def check_t(self, t, lo: int = 1) -> np.ndarray:
        arr = np.asarray(t)
        if not np.issubdtype(arr.dtype, np.integer):
            raise TypeError(f"timesteps must be integers, got {arr.dtype}")
        if arr.size and (arr.min() < lo or arr.max() > self.T):
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return arr

    def coefficients(self, t, ndim: int = 4) -> tuple[np.ndarray, np.ndarray]:
        """sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t), shaped to broadcast
        against an array with `ndim` dims (per-sample along axis 0 when t is
        a vector)."""
        t = self.check_t(t, lo=0)
        ab = self.alpha_bar[t]
        a = np.sqrt(ab)
        b = np.sqrt(1.0 - ab)
        if np.ndim(t) == 1:
            shape = (-1,) + (1,) * (ndim - 1)
            a, b = a.reshape(shape), b.reshape(shape)
        return a, b


def linear_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar[0] = 1.0
    for arr in (beta, alpha, alpha_bar):
        arr.flags.writeable = False
    return NoiseSchedule(T, beta, alpha, alpha_bar, float(beta_start), float(beta_end))


def q_sample(x0, t, eps, s: NoiseSchedule):
    """Jump straight to x_t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps.

    `t` is an int or one int per sample. Works on numpy arrays and on
    Tensors (keeping the graph through x0).
    """
    s.check_t(t)
    if tuple(np.shape(eps)) != tuple(np.shape(x0.data if isinstance(x0, Tensor) else x0)):
        raise ValueError("eps must have the shape of x0")
    ndim = len(np.shape(eps))
    a, b = s.coefficients(t, ndim)
    eps_arr = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    dtype = np.float32 if eps_arr.dtype != np.float64 else np.float64
    a = np.asarray(a, dtype=dtype)
    noise = np.asarray(b, dtype=dtype) * eps_arr
    if isinstance(x0, Tensor):
        return x0 * Tensor(a) + Tensor(noise.astype(dtype, copy=False))
    return (a * np.asarray(x0, dtype=dtype) + noise).astype(dtype, copy=False)


def reverse_step(x_t: np.ndarray, x0_hat: np.ndarray, t_from: int, t_to: int,
                 s: NoiseSchedule) -> np.ndarray:
    """One deterministic (zero posterior variance) reverse hop t_from -> t_to."""
    if not s.T >= t_from > t_to >= 0:
        raise ValueError(f"need T >= t_from > t_to >= 0, got t_from={t_from}, t_to={t_to}")
    x0_hat = np.asarray(x0_hat)
    if t_to == 0:
        return x0_hat.copy()
    ab_from, ab_to = s.alpha_bar[t_from], s.alpha_bar[t_to]
    x_t64 = np.asarray(x_t, dtype=np.float64)
    x064 = x0_hat.astype(np.float64)
    eps_hat = (x_t64 - np.sqrt(ab_from) * x064) / np.sqrt(1.0 - ab_from)
    out = np.sqrt(ab_to) * x064 + np.sqrt(1.0 - ab_to) * eps_hat
    return out.astype(np.result_type(x_t, x0_hat), copy=False)


def predict_x0_from_eps(x_t: np.ndarray, eps_hat: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    """Invert the forward jump for a noise-predicting denoiser."""
    ab = s.alpha_bar[t]
    out = (np.asarray(x_t, np.float64) - np.sqrt(1.0 - ab) * np.asarray(eps_hat, np.float64)) / np.sqrt(ab)
    return out.astype(np.float32)


@dataclass(frozen=True)
class StepPlan:
    """Descending sampling timesteps; the last hop always lands on t = 0."""

    T: int
    timesteps: tuple[int, ...]

    @property
    def K(self) -> int:
        return len(self.timesteps)

    def transitions(self) -> list[tuple[int, int]]:
        targets = self.timesteps[1:] + (0,)
        return list(zip(self.timesteps, targets))


def make_step_plan(T: int, K: int) -> StepPlan:
    if not 1 <= K <= T:
        raise ValueError(f"need 1 <= K <= T, got K={K}, T={T}")
    # integer even stride T/K anchored at T; spacing >= 1 keeps entries distinct
    steps = tuple(T - (i * T) // K for i in range(K))
    return StepPlan(T, steps)
