"""Noise schedules and the single-step updates of the reverse process.

Timesteps are 1-based: t runs T..1 during sampling and the cumulative
product table defines abar(0) = 1 so the last update lands on the clean
sample. The deterministic reverse update is the eta=0 form; the ancestral
(stochastic) update takes its noise from the caller so every run is
reproducible from a caller-owned seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import ShapeError, Tensor, _wrap

DEFAULT_T = 50
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

# Prior-noise injection defaults: z_t + alpha * z_T applied once t drops
# below tau.
DEFAULT_INJECT_ALPHA = 0.003
DEFAULT_INJECT_TAU = 25


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta values and their cumulative signal products.

    ``beta[i]`` and ``alpha_bar[i]`` correspond to timestep ``i + 1``.
    """

    T: int
    beta: tuple[float, ...]
    alpha_bar: tuple[float, ...]

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"schedule needs T >= 2, got {self.T}")
        if len(self.beta) != self.T or len(self.alpha_bar) != self.T:
            raise ValueError("beta and alpha_bar must both have length T")
        prev = 1.0
        for t, (b, ab) in enumerate(zip(self.beta, self.alpha_bar), start=1):
            if not 0.0 < b < 1.0:
                raise ValueError(f"beta[{t}] = {b} outside (0, 1)")
            if not 0.0 < ab < 1.0:
                raise ValueError(f"alpha_bar[{t}] = {ab} outside (0, 1)")
            if ab >= prev:
                raise ValueError(f"alpha_bar not strictly decreasing at t={t}")
            prev = ab

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return self.beta[t - 1]

    def alpha_bar_at(self, t: int) -> float:
        """abar(t) with the abar(0) = 1 boundary."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return self.alpha_bar[t - 1]

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} out of range 1..{self.T}")

    def to_json(self) -> str:
        return json.dumps(
            {"T": self.T, "beta": list(self.beta), "alpha_bar": list(self.alpha_bar)}
        )

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        obj = json.loads(text)
        return cls(T=obj["T"], beta=tuple(obj["beta"]), alpha_bar=tuple(obj["alpha_bar"]))


def make_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linearly spaced betas over T steps with their cumulative products."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T)
    abar = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=T, beta=tuple(float(b) for b in betas), alpha_bar=tuple(float(a) for a in abar))


def add_noise(x0: Tensor, eps: Tensor, t: int, s: NoiseSchedule) -> Tensor:
    """Forward noising: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"add_noise: shape mismatch {x0.shape} vs {eps.shape}")
    ab = s.alpha_bar_at(t)
    if t == 0:
        raise ValueError("add_noise: t must be >= 1")
    return _wrap(math.sqrt(ab) * x0.data + math.sqrt(1.0 - ab) * eps.data)


def ddim_step(z_t: Tensor, eps: Tensor, t: int, t_prev: int, s: NoiseSchedule) -> Tensor:
    """Deterministic reverse update from timestep t to t_prev (t_prev may be 0).

    z_prev = sqrt(abar_p / abar_t) * z_t
           + sqrt(abar_p) * (sqrt(1/abar_p - 1) - sqrt(1/abar_t - 1)) * eps
    """
    if z_t.shape != eps.shape:
        raise ShapeError(f"ddim_step: shape mismatch {z_t.shape} vs {eps.shape}")
    if t_prev >= t:
        raise ValueError(f"ddim_step: t_prev={t_prev} must be < t={t}")
    if t_prev < 0:
        raise ValueError(f"ddim_step: t_prev={t_prev} must be >= 0")
    ab_t = s.alpha_bar_at(t)
    ab_p = s.alpha_bar_at(t_prev)
    coef_z = math.sqrt(ab_p / ab_t)
    coef_e = math.sqrt(ab_p) * (math.sqrt(1.0 / ab_p - 1.0) - math.sqrt(1.0 / ab_t - 1.0))
    return _wrap(coef_z * z_t.data + coef_e * eps.data)


def ddpm_step(z_t: Tensor, eps: Tensor, t: int, s: NoiseSchedule, noise: Tensor) -> Tensor:
    """Ancestral reverse update; the caller supplies ``noise`` (zeros at t=1)."""
    if z_t.shape != eps.shape:
        raise ShapeError(f"ddpm_step: shape mismatch {z_t.shape} vs {eps.shape}")
    if z_t.shape != noise.shape:
        raise ShapeError(f"ddpm_step: noise shape mismatch {z_t.shape} vs {noise.shape}")
    b_t = s.beta_at(t)
    ab_t = s.alpha_bar_at(t)
    mean = (z_t.data - (b_t / math.sqrt(1.0 - ab_t)) * eps.data) / math.sqrt(1.0 - b_t)
    return _wrap(mean + math.sqrt(b_t) * noise.data)


def inject_prior_noise(z_t: Tensor, z_T: Tensor, t: int, alpha: float = DEFAULT_INJECT_ALPHA, tau: int = DEFAULT_INJECT_TAU) -> Tensor:
    """Add alpha * z_T to the latent for late steps (t < tau); identity otherwise.

    The t >= tau branch returns the input object unchanged, so callers can
    assert exact identity.
    """
    if z_t.shape != z_T.shape:
        raise ShapeError(f"inject_prior_noise: shape mismatch {z_t.shape} vs {z_T.shape}")
    if t >= tau:
        return z_t
    return _wrap(z_t.data + float(alpha) * z_T.data)
