"""Closed-form error models, generalization bound, and optimal-sparsity search.

Two estimation-error variants are provided. PAPER_LITERAL uses log(T/k),
which vanishes at k = T, so the total error is always minimized at k = T (a
documented degeneracy). THEOREM_CONSISTENT replaces it with log T, making
the approximation/estimation trade-off non-degenerate; it is the default
for the optimal-k search. All hidden big-O constants are exposed as c1, c2
(default 1.0); outputs are "up to constants". Natural log throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .common import ConfigError, config_hash, derive_seed

PAPER_LITERAL = "PAPER_LITERAL"
THEOREM_CONSISTENT = "THEOREM_CONSISTENT"
_VARIANTS = (PAPER_LITERAL, THEOREM_CONSISTENT)


@dataclass(frozen=True)
class ErrorModelParams:
    N: int                 # number of tasks
    T: int                 # total experts
    d_N: float             # router base complexity (N=1 case)
    m: int                 # sample count
    c1: float = 1.0        # approximation-error constant
    c2: float = 1.0        # estimation-error constant
    delta: float = 0.05
    variant: str = THEOREM_CONSISTENT

    def __post_init__(self):
        if self.N < 1 or self.T < 1 or self.m < 1:
            raise ConfigError("N, T, m must be positive integers")
        if self.d_N <= 0 or self.c1 < 0 or self.c2 < 0:
            raise ConfigError("d_N must be positive; c1, c2 non-negative")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError("delta must lie in (0,1)")
        if self.variant not in _VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")


def _check_k(k: int, T: int) -> None:
    if not (1 <= k <= T):
        raise ConfigError(f"k={k} out of range [1, {T}]")


def approx_error(k: int, params: ErrorModelParams) -> float:
    """Capacity shortfall across the N^2 pairwise task compositions: c1*N^2/k."""
    _check_k(k, params.T)
    return params.c1 * params.N ** 2 / k


def est_error(k: int, params: ErrorModelParams) -> float:
    """Sampling error of the routed hypothesis class.

    PAPER_LITERAL: c2 * sqrt(N*k*d_N/m * ln(T/k)), exactly 0 at k = T.
    THEOREM_CONSISTENT: c2 * sqrt(N*k*d_N*ln(T)/m), increasing in k for T >= 2.
    """
    _check_k(k, params.T)
    if params.variant == PAPER_LITERAL:
        return params.c2 * math.sqrt(
            params.N * k * params.d_N / params.m * math.log(params.T / k))
    return params.c2 * math.sqrt(
        params.N * k * params.d_N * math.log(params.T) / params.m)


def total_error(k: int, params: ErrorModelParams) -> float:
    return approx_error(k, params) + est_error(k, params)


def optimal_k(params: ErrorModelParams) -> tuple[int, list[float]]:
    """Grid argmin of the total error over k in {1..T}; ties take the
    smallest k. Also returns the full curve for plotting."""
    curve = [total_error(k, params) for k in range(1, params.T + 1)]
    k_star = 1 + int(np.argmin(curve))  # argmin returns the first minimum
    return k_star, curve


def optimal_k_continuous(params: ErrorModelParams) -> float:
    """Stationary point of the THEOREM_CONSISTENT total error:

        k* = (2*c1/c2)^(2/3) * N * (m / (d_N * ln T))^(1/3)

    Only defined for that variant; the PAPER_LITERAL curve has no interior
    stationary point of this form.
    """
    if params.variant != THEOREM_CONSISTENT:
        raise ConfigError("closed-form k* requires the THEOREM_CONSISTENT variant")
    if params.c2 == 0.0:
        raise ConfigError("closed-form k* requires c2 > 0")
    if params.T < 2:
        raise ConfigError("closed-form k* requires T >= 2")
    return ((2.0 * params.c1 / params.c2) ** (2.0 / 3.0) * params.N
            * (params.m / (params.d_N * math.log(params.T))) ** (1.0 / 3.0))


def theorem1_bound(C: float, R_m: float, k: int, N: int, d_N: float, T: int,
                   m: int, delta: float) -> float:
    """Generalization-error upper bound, constants taken literally:

        4*C*R_m + 2*sqrt((2*k*N*d_N*ln T + N*d_N*ln(2m) + ln(2/delta)) / (2m))
    """
    if C < 0 or R_m < 0 or N < 1 or d_N < 0 or T < 1 or m < 1:
        raise ConfigError("all bound inputs must be positive (d_N, R_m >= 0)")
    if not (0.0 < delta < 1.0):
        raise ConfigError("delta must lie in (0,1)")
    _check_k(k, T)
    inner = (2.0 * k * N * d_N * math.log(T) + N * d_N * math.log(2.0 * m)
             + math.log(2.0 / delta)) / (2.0 * m)
    return 4.0 * C * R_m + 2.0 * math.sqrt(inner)


def routing_pattern_bound(T: int, k: int, N: int, d_N: float, m: int) -> float:
    """Log of the routing-pattern count bound: the number of distinct sparse
    masks realizable on 2m points is at most C(T,k)^(2*N*d_N) * (2m)^(N*d_N).

    Returned in log space (natural log) to avoid overflow.
    """
    if T < 1 or N < 1 or d_N < 0 or m < 1:
        raise ConfigError("invalid combinatorial inputs")
    if k > T or k < 1:
        raise ConfigError(f"k={k} out of range [1, {T}]")
    log_binom = (math.lgamma(T + 1) - math.lgamma(k + 1)
                 - math.lgamma(T - k + 1))
    return 2.0 * N * d_N * log_binom + N * d_N * math.log(2.0 * m)


@dataclass
class FunctionTable:
    """A finite hypothesis class evaluated on a fixed sample: row h is
    (f_h(z_1), ..., f_h(z_m))."""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.size == 0:
            raise ConfigError("function table must have at least one row")
        if not np.isfinite(self.values).all():
            raise ConfigError("function table entries must be finite")


def rademacher_mc(table: FunctionTable, num_draws: int,
                  seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo estimate of the empirical Rademacher complexity
    E_sigma[sup_f (1/m) sum_i sigma_i f(z_i)] with its standard error."""
    if num_draws < 1:
        raise ConfigError("num_draws must be >= 1")
    vals = table.values
    m = vals.shape[1]
    rng = np.random.default_rng(derive_seed(seed, "rademacher"))
    sups = np.empty(num_draws)
    chunk = max(1, min(num_draws, (1 << 22) // max(1, m)))
    done = 0
    while done < num_draws:
        n = min(chunk, num_draws - done)
        sigma = rng.integers(0, 2, size=(n, m)) * 2.0 - 1.0
        sups[done:done + n] = (sigma @ vals.T).max(axis=1) / m
        done += n
    mean = float(sups.mean())
    if num_draws == 1:
        return mean, 0.0
    return mean, float(sups.std(ddof=1) / math.sqrt(num_draws))


def rademacher_exact(table: FunctionTable) -> float:
    """Exhaustive enumeration over all 2^m sign vectors (m <= ~20)."""
    vals = table.values
    m = vals.shape[1]
    if m > 20:
        raise ConfigError("exhaustive enumeration is limited to m <= 20")
    bits = ((np.arange(1 << m)[:, None] >> np.arange(m)[None, :]) & 1)
    sigma = bits * 2.0 - 1.0
    return float((sigma @ vals.T).max(axis=1).mean() / m)


def powerlaw_weights(difficulty_inverses, alpha: float) -> np.ndarray:
    """Task-pair weights w[i,j] ~ (D_i + D_j)^(-alpha), normalized so the
    matrix sums to N^2 (uniform difficulties then reproduce the unweighted
    pairwise count)."""
    D = np.asarray(difficulty_inverses, dtype=np.float64)
    if alpha <= 1.0:
        raise ConfigError("alpha must exceed 1")
    if (D <= 0).any():
        raise ConfigError("difficulty inverses must be positive")
    raw = (D[:, None] + D[None, :]) ** (-alpha)
    n = D.shape[0]
    return raw * (n * n / raw.sum())


def weighted_approx_error(weights: np.ndarray, k: int, c1: float = 1.0) -> float:
    """Power-law-weighted approximation error: c1 * sum(w) / k."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    return c1 * float(np.asarray(weights).sum()) / k


def export_error_curve(params: ErrorModelParams, out_dir) -> str:
    """Write the k -> (approx, est, total) curve as CSV; the filename embeds
    the parameter hash. Returns the file path."""
    import os
    from dataclasses import asdict
    h = config_hash(asdict(params))
    path = os.path.join(out_dir, f"theory_curve_{h}.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "approx", "est", "total"])
        for k in range(1, params.T + 1):
            w.writerow([k, approx_error(k, params), est_error(k, params),
                        total_error(k, params)])
    return path
