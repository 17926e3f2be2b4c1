"""Hoeffding deviation, the meta-learning generalization bound, and a Monte-Carlo check of it.

Logs are natural logs.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol

import numpy as np


class BoundDomainError(ValueError):
    pass


def _check(n: int, delta: float, name: str = "n") -> None:
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 1:
        raise BoundDomainError(f"{name} must be a positive integer, got {n!r}")
    if not 0.0 < delta < 1.0:
        raise BoundDomainError(f"delta must lie strictly inside (0, 1), got {delta!r}")


def hoeffding_epsilon(n: int, delta: float) -> float:
    """sqrt(log(2/delta) / (2n)): two-sided deviation of a mean of n [0,1] variables."""
    _check(n, delta)
    return math.sqrt(math.log(2.0 / delta) / (2.0 * n))


@dataclass(frozen=True)
class BoundQuery:
    n: int
    m: int
    delta: float
    r_star: float | None = None

    def __post_init__(self):
        _check(self.n, self.delta, "n")
        _check(self.m, self.delta, "m")
        if self.r_star is not None and not 0.0 <= self.r_star <= 1.0:
            raise BoundDomainError(f"r_star must lie in [0, 1], got {self.r_star!r}")


@dataclass(frozen=True)
class BoundResult:
    epsilon_n: float
    epsilon_m: float
    bound_rhs: float
    r_star: float
    r_star_known: bool

    @property
    def excess(self) -> float:
        """Bound minus the optimal risk term."""
        return self.bound_rhs - self.r_star

    @property
    def convention(self) -> str:
        return "R(theta*) given" if self.r_star_known else "R(theta*) taken as 0 (excess-risk terms only)"


def theorem1_bound(q: BoundQuery) -> BoundResult:
    """Held-out risk bound for the optimizer picked by empirical risk minimization.

    ``epsilon_n`` and ``epsilon_m`` are Hoeffding deviations at delta/3 for the
    meta-training set (size n) and the held-out set (size m); the bound is
    r_star + 2 * epsilon_n + epsilon_m, i.e.
    r_star + sqrt(2 log(6/delta) / n) + sqrt(log(6/delta) / (2m)).
    """
    log_term = math.log(6.0 / q.delta)
    r_star = 0.0 if q.r_star is None else q.r_star
    rhs = r_star + math.sqrt(2.0 * log_term / q.n) + math.sqrt(log_term / (2.0 * q.m))
    return BoundResult(
        epsilon_n=hoeffding_epsilon(q.n, q.delta / 3.0),
        epsilon_m=hoeffding_epsilon(q.m, q.delta / 3.0),
        bound_rhs=rhs,
        r_star=r_star,
        r_star_known=q.r_star is not None,
    )


class LossModel(Protocol):
    """A finite family of parameters with losses in [0, 1] on sampled examples."""

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray: ...

    def losses(self, xs: np.ndarray) -> np.ndarray:
        """Loss matrix of shape (family size, len(xs))."""
        ...

    def population_risk(self) -> np.ndarray: ...


class BernoulliLossFamily:
    """Parameter i fails on example u ~ U(0, 1) when u < p_i, so its risk is p_i."""

    def __init__(self, failure_rates: Sequence[float]):
        rates = np.asarray(failure_rates, dtype=float)
        if rates.ndim != 1 or rates.size == 0 or np.any((rates < 0) | (rates > 1)):
            raise ValueError("failure_rates must be a non-empty sequence in [0, 1]")
        self.rates = rates

    def sample(self, rng, size):
        return rng.random(size)

    def losses(self, xs):
        return (xs[None, :] < self.rates[:, None]).astype(float)

    def population_risk(self):
        return self.rates.copy()


@dataclass(frozen=True)
class CoverageResult:
    coverage: float
    trials: int
    bound: BoundResult
    max_gap: float
    gaps: np.ndarray

    def __float__(self) -> float:
        return self.coverage


def empirical_bound_check(loss_model: LossModel, n: int, m: int, delta: float, trials: int,
                          rng_seed: int = 0) -> CoverageResult:
    """Fraction of trials where the held-out risk of the ERM choice stays under the bound.

    Each trial draws S1 (size n) and S2 (size m) independently, picks the
    parameter with lowest empirical risk on S1 (first on ties) and compares
    its S2 risk with the bound evaluated at the true optimal risk.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    r_star = float(np.min(loss_model.population_risk()))
    bound = theorem1_bound(BoundQuery(n, m, delta, r_star))
    streams = np.random.SeedSequence(rng_seed).spawn(trials)
    gaps = np.empty(trials)
    hits = 0
    for t, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        s1 = loss_model.sample(rng, n)
        s2 = loss_model.sample(rng, m)
        chosen = int(np.argmin(loss_model.losses(s1).mean(axis=1)))
        held_out = float(loss_model.losses(s2)[chosen].mean())
        gaps[t] = held_out - r_star
        hits += held_out <= bound.bound_rhs
    return CoverageResult(hits / trials, trials, bound, float(gaps.max()), gaps)
