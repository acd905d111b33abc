"""Noise and degradation schedules.

Arrays are indexed by step with ``t = 0`` meaning the clean image: ``beta[0]``
is a zero sentinel and ``alpha_bar[0] == 1``, so step ``t`` lives at index
``t`` for ``t`` in ``1..T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    one_minus_alpha_bar: np.ndarray  # accurate even when beta is tiny

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        """Build from the T per-step variances (steps 1..T)."""
        betas = np.asarray(betas, dtype=np.float64).reshape(-1)
        if betas.size < 1:
            raise ContractError("a schedule needs at least one step")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ContractError("every beta must lie in (0, 1)")
        beta = np.concatenate([[0.0], betas])
        alpha_bar = np.cumprod(1.0 - beta)
        one_minus = -np.expm1(np.cumsum(np.log1p(-beta)))
        beta_tilde = np.zeros_like(beta)
        beta_tilde[1:] = one_minus[:-1] / one_minus[1:] * beta[1:]
        for arr in (beta, alpha_bar, beta_tilde, one_minus):
            arr.setflags(write=False)
        return cls(beta, alpha_bar, beta_tilde, one_minus)

    def check_step(self, t: int, upper: int | None = None) -> int:
        upper = self.T if upper is None else upper
        if not isinstance(t, (int, np.integer)) or not 1 <= t <= upper:
            raise ContractError(f"step t={t} outside [1, {upper}]")
        return int(t)

    def posterior_coefficients(self, t: int) -> tuple[float, float]:
        """Weights of (x0, x_t) in the mean of q(x_{t-1} | x_t, x0)."""
        if t == 1:
            # exact in real arithmetic; avoid 1 - (1 - beta) != beta in floats
            return 1.0, 0.0
        om_t, om_prev = self.one_minus_alpha_bar[t], self.one_minus_alpha_bar[t - 1]
        beta_t = self.beta[t]
        c0 = math.sqrt(self.alpha_bar[t - 1]) * beta_t / om_t
        ct = math.sqrt(1.0 - beta_t) * om_prev / om_t
        return c0, ct


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ContractError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(T)))


def degradation_coefficient(t: int, T: int) -> float:
    """Weight of the degraded image at step t: sin(t/T * pi/2)."""
    if T < 1 or not 0 <= t <= T:
        raise ContractError(f"step t={t} outside [0, {T}]")
    if t == 0:
        return 0.0
    if t == T:
        return 1.0
    return math.sin(t / T * (math.pi / 2.0))


@dataclass(frozen=True)
class DegradationSchedule:
    T: int
    alpha_ddot: np.ndarray

    @classmethod
    def build(cls, T: int) -> "DegradationSchedule":
        values = np.array([degradation_coefficient(t, T) for t in range(T + 1)])
        values.setflags(write=False)
        return cls(T, values)
