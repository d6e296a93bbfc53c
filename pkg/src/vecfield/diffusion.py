"""Cosine-schedule DDPM kernels on generic latent arrays.

Arrays are indexed by timestep ``t = 0..T``; index 0 holds the identity
values (``beta = 0``, ``alpha = alpha_bar = 1``, ``sigma = 0``).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

BETA_MIN = 1e-8
BETA_MAX = 0.999


def cosine_alpha_bar(t: int, T: int = 1000, s: float = 0.008) -> float:
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")

    def f(x):
        return math.cos((x / T + s) / (1 + s) * math.pi / 2) ** 2

    return f(t) / f(0)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Betas from the cosine ``alpha_bar`` ratio, clipped to [1e-8, 0.999].

    ``alpha_bar`` is the running product of the clipped ``alpha`` so the
    forward marginals and the reverse kernels stay mutually consistent.
    """

    T: int = 1000
    s: float = 0.008
    beta: np.ndarray = field(init=False, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    sigma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.s < 0:
            raise ValueError("s must be non-negative")
        raw = np.array([cosine_alpha_bar(t, self.T, self.s) for t in range(self.T + 1)])
        beta = np.zeros(self.T + 1)
        beta[1:] = np.clip(1.0 - raw[1:] / raw[:-1], BETA_MIN, BETA_MAX)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        sigma = np.zeros(self.T + 1)
        sigma[1:] = np.sqrt((1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:])
        for name, arr in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar), ("sigma", sigma)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def _check_t(self, t: int, low: int = 1):
        if not low <= t <= self.T:
            raise ValueError(f"t={t} outside [{low}, {self.T}]")


def _latent(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def forward_sample(z0, t: int, schedule: DiffusionSchedule, noise) -> np.ndarray:
    z0, noise = _latent(z0, "z0"), _latent(noise, "noise")
    _same_shape(z0, noise)
    schedule._check_t(t, low=0)
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise


def reverse_step(z_t, t: int, eps_pred, schedule: DiffusionSchedule, noise=None,
                 sigma: float | None = None) -> np.ndarray:
    """One ancestral step ``z_t -> z_{t-1}``; the noise term is dropped at ``t = 1``."""
    z_t, eps_pred = _latent(z_t, "z_t"), _latent(eps_pred, "eps_pred")
    _same_shape(z_t, eps_pred)
    schedule._check_t(t)
    beta, alpha, ab = schedule.beta[t], schedule.alpha[t], schedule.alpha_bar[t]
    mean = (z_t - beta / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(alpha)
    if t == 1 or noise is None:
        return mean
    noise = _latent(noise, "noise")
    _same_shape(z_t, noise)
    sd = schedule.sigma[t] if sigma is None else sigma
    return mean + sd * noise


def posterior_mean(z_t, z0, t: int, schedule: DiffusionSchedule) -> np.ndarray:
    """Mean of q(z_{t-1} | z_t, z0)."""
    schedule._check_t(t)
    beta, alpha = schedule.beta[t], schedule.alpha[t]
    ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * np.asarray(z0) + ct * np.asarray(z_t)


def x0_to_eps(z_t, x0_pred, t: int, schedule: DiffusionSchedule) -> np.ndarray:
    z_t, x0_pred = _latent(z_t, "z_t"), _latent(x0_pred, "x0_pred")
    _same_shape(z_t, x0_pred)
    schedule._check_t(t, low=0)
    ab = schedule.alpha_bar[t]
    if ab >= 1.0:
        raise ValueError("alpha_bar_t = 1: noise is undefined")
    return (z_t - np.sqrt(ab) * x0_pred) / np.sqrt(1.0 - ab)


def eps_to_x0(z_t, eps_pred, t: int, schedule: DiffusionSchedule) -> np.ndarray:
    schedule._check_t(t, low=0)
    ab = schedule.alpha_bar[t]
    return (np.asarray(z_t) - np.sqrt(1.0 - ab) * np.asarray(eps_pred)) / np.sqrt(ab)


def oracle_denoiser(z_t, t: int, z0_true, schedule: DiffusionSchedule) -> np.ndarray:
    """Exact noise prediction given the clean sample."""
    return x0_to_eps(z_t, z0_true, t, schedule)


@dataclass
class ChainResult:
    z0: np.ndarray
    max_errors: np.ndarray  # max |z_t - z0| after each step, from t = T-1 down to 0

    @property
    def final_error(self) -> float:
        return float(self.max_errors[-1])


def oracle_chain(z0, schedule: DiffusionSchedule, z_T=None, rng: np.random.Generator | None = None,
                 inject_noise: bool = False) -> ChainResult:
    """Run the reverse chain from ``z_T`` with the oracle denoiser."""
    z0 = _latent(z0, "z0")
    rng = np.random.default_rng(0) if rng is None else rng
    z = rng.standard_normal(z0.shape) if z_T is None else _latent(z_T, "z_T").copy()
    errors = np.empty(schedule.T)
    for t in range(schedule.T, 0, -1):
        eps = oracle_denoiser(z, t, z0, schedule)
        noise = rng.standard_normal(z0.shape) if inject_noise else None
        z = reverse_step(z, t, eps, schedule, noise)
        errors[schedule.T - t] = np.max(np.abs(z - z0)) if z.size else 0.0
    return ChainResult(z, errors)


def schedule_csv(schedule: DiffusionSchedule) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "beta", "alpha", "alpha_bar", "sigma"])
    for t in range(schedule.T + 1):
        w.writerow([t, repr(float(schedule.beta[t])), repr(float(schedule.alpha[t])),
                    repr(float(schedule.alpha_bar[t])), repr(float(schedule.sigma[t]))])
    return buf.getvalue()
