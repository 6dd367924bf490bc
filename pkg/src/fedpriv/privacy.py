"""Gaussian noise calibration, injection, and hierarchical budget bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import ParamVector


class BudgetError(RuntimeError):
    """Raised when a spend would push the ledger past its total budget."""


def calibrate_sigma(epsilon: float, delta: float, sensitivity: float) -> float:
    """Noise std of the gaussian mechanism: sensitivity*sqrt(2 ln(1.25/delta))/epsilon."""
    if not (math.isfinite(epsilon) and epsilon > 0):
        raise ValueError("epsilon must be positive")
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1)")
    if not (math.isfinite(sensitivity) and sensitivity >= 0):
        raise ValueError("sensitivity must be >= 0")
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


@dataclass(frozen=True)
class NoiseSpec:
    epsilon: float
    delta: float
    sensitivity: float

    @property
    def sigma(self) -> float:
        return calibrate_sigma(self.epsilon, self.delta, self.sensitivity)


def add_gaussian_noise(delta_theta: ParamVector, sigma: float, seed: int) -> ParamVector:
    """Elementwise i.i.d. N(0, sigma^2) on top of the update; deterministic per seed."""
    if not (math.isfinite(sigma) and sigma >= 0):
        raise ValueError("sigma must be finite and >= 0")
    if sigma == 0.0:
        return delta_theta.copy()
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=delta_theta.size)
    return delta_theta.with_values(delta_theta.values + noise)


def per_round_budget(epsilon_total: float, rounds: int) -> float:
    """Uniform per-round slice of the total budget."""
    if not (math.isfinite(epsilon_total) and epsilon_total > 0):
        raise ValueError("epsilon_total must be positive")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    return epsilon_total / rounds


def per_client_budget(
    epsilon_round: float, sample_count: float, contribution: float, denom: float
) -> float:
    """Per-client slice weighted by sample count and contribution weight.

    The denominator is passed explicitly; callers normally supply the sum of
    sample_count*contribution over the participating clients.
    """
    if epsilon_round <= 0:
        raise ValueError("epsilon_round must be positive")
    if sample_count <= 0:
        raise ValueError("sample_count must be positive")
    if contribution <= 0:
        raise ValueError("contribution must be positive")
    if denom <= 0:
        raise ValueError("denominator must be positive")
    return epsilon_round * (sample_count * contribution / denom)


@dataclass
class PrivacyLedger:
    """Tracks total budget, per-round slices, and every per-client spend."""

    epsilon_total: float
    rounds: int
    per_round: tuple[float, ...]
    spend_log: list[tuple[int, int, float]] = field(default_factory=list)

    @classmethod
    def plan(cls, epsilon_total: float, rounds: int) -> "PrivacyLedger":
        eps_t = per_round_budget(epsilon_total, rounds)
        return cls(epsilon_total, rounds, (eps_t,) * rounds)

    @property
    def spent(self) -> float:
        return float(sum(e for _, _, e in self.spend_log))

    @property
    def remaining(self) -> float:
        return self.epsilon_total - self.spent

    def round_budget(self, round_no: int) -> float:
        return self.per_round[round_no - 1]

    def can_spend(self, epsilon: float) -> bool:
        return epsilon <= self.remaining + 1e-9

    def spend(self, round_no: int, client_id: int, epsilon: float) -> None:
        if epsilon < 0:
            raise ValueError("cannot spend a negative budget")
        if not self.can_spend(epsilon):
            raise BudgetError(
                f"spend {epsilon} exceeds remaining budget {self.remaining}"
            )
        self.spend_log.append((round_no, client_id, epsilon))

    def spent_in_round(self, round_no: int) -> float:
        return float(sum(e for r, _, e in self.spend_log if r == round_no))


@dataclass(frozen=True)
class PULConfig:
    """Grid and weights for the privacy-utility trade-off search."""

    alpha: float
    beta: float
    sigma_grid: tuple[float, ...]
    epsilon_grid: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not self.sigma_grid or not self.epsilon_grid:
            raise ValueError("grids must be nonempty")
        if any(s <= 0 for s in self.sigma_grid) or any(e <= 0 for e in self.epsilon_grid):
            raise ValueError("grid entries must be positive")


def pul_search(
    error_fn: Callable[[float], float], cfg: PULConfig
) -> tuple[float, float, float]:
    """Grid minimizer of alpha*Error(sigma) + beta/epsilon.

    Ties break toward smaller sigma, then larger epsilon.
    """
    best: tuple[float, float, float] | None = None
    best_key: tuple[float, float, float] | None = None
    for sigma in cfg.sigma_grid:
        err = float(error_fn(sigma))
        if not math.isfinite(err):
            raise ValueError(f"error_fn returned non-finite value at sigma={sigma}")
        for eps in cfg.epsilon_grid:
            objective = cfg.alpha * err + cfg.beta / eps
            key = (objective, sigma, -eps)
            if best_key is None or key < best_key:
                best_key = key
                best = (sigma, eps, objective)
    assert best is not None
    return best
