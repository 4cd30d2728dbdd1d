"""Closed-form A-optimal design for the log-linear exponential model.

With log observations ``y_j = alpha + beta t_j + eps_j`` and i.i.d. noise of
variance ``sigma2``, the least-squares estimator has expected squared error

    F(t) = sigma2 (s2 + m) / (m s2 - s1^2),   s1 = sum t_j,  s2 = sum t_j^2.

Optimal designs put every point at 0 or 1; with ``k`` points at 1 the risk is
``sigma2 (m + k) / (k (m - k))``, minimised near ``k = m (sqrt 2 - 1)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError

__all__ = [
    "SingularDesignError",
    "ls_estimate",
    "risk_exact",
    "risk_endpoint",
    "optimal_split",
    "endpoint_design",
    "exchange",
    "risk_monte_carlo",
    "EnumerationReport",
    "verify_endpoint_optimality",
    "oracle_table",
]


class SingularDesignError(ValueError):
    """All sampling times coincide, so the normal equations are singular."""


def _moments(times):
    t = np.asarray(times, dtype=np.float64).ravel()
    m = t.size
    s1, s2 = t.sum(), (t * t).sum()
    det = m * s2 - s1 * s1
    if m < 2 or det <= 1e-14 * max(1.0, m * s2):
        raise SingularDesignError("design has fewer than two distinct times")
    return t, m, s1, s2, det


def ls_estimate(times, logdata):
    """Least-squares ``(alpha_hat, beta_hat)`` from the 2x2 normal equations.

    ``logdata`` may be ``(m,)`` or ``(N, m)`` for many data vectors at once.
    """
    t, m, s1, s2, det = _moments(times)
    y = np.asarray(logdata, dtype=np.float64)
    sy = y.sum(axis=-1)
    sty = (y * t).sum(axis=-1)
    alpha = (s2 * sy - s1 * sty) / det
    beta = (m * sty - s1 * sy) / det
    return np.stack([alpha, beta], axis=-1)


def risk_exact(times, sigma2=1.0):
    """``sigma2 * trace((A^T A)^{-1})`` for the design ``times``."""
    _, m, _, s2, det = _moments(times)
    return sigma2 * (s2 + m) / det


def risk_endpoint(m, k, sigma2=1.0):
    """Risk of the design with ``k`` points at 1 and ``m - k`` at 0."""
    if not 1 <= k <= m - 1:
        raise ContractError(f"k must lie in [1, m-1], got k={k}, m={m}")
    return sigma2 * (m + k) / (k * (m - k))


def endpoint_design(m, k):
    return np.concatenate([np.zeros(m - k), np.ones(k)])


def optimal_split(m, sigma2=1.0):
    """Best integer ``k`` among the floor/ceil of ``m (sqrt 2 - 1)``; ties go to the smaller k."""
    if m < 2:
        raise ContractError("need m >= 2")
    k_hat = m * (math.sqrt(2.0) - 1.0)
    candidates = sorted({min(max(k, 1), m - 1) for k in (math.floor(k_hat), math.ceil(k_hat))})
    best = min(candidates, key=lambda k: (risk_endpoint(m, k, sigma2), k))
    return best, risk_endpoint(m, best, sigma2)


def exchange(times, k, l):
    """Move ``(t_k, t_l)`` to ``(0, t_k + t_l)`` or ``(t_k + t_l - 1, 1)``; keeps ``s1``, grows ``s2``."""
    t = np.array(times, dtype=np.float64)
    total = t[k] + t[l]
    if total < 1:
        t[k], t[l] = 0.0, total
    else:
        t[k], t[l] = total - 1.0, 1.0
    return t


def risk_monte_carlo(times, sigma, n_draws, rng=None, x_true=(0.0, 1.0), chunk=20000):
    """Empirical ``E ||x_hat - x||^2`` and componentwise bias over ``n_draws`` noise draws.

    Returns ``(mean, standard_error, bias_mean, bias_standard_error)``.
    """
    rng = np.random.default_rng(rng)
    t = np.asarray(times, dtype=np.float64).ravel()
    x = np.asarray(x_true, dtype=np.float64)
    clean = x[0] + x[1] * t
    sq, errs = [], []
    done = 0
    while done < n_draws:
        b = min(chunk, n_draws - done)
        y = clean + sigma * rng.standard_normal((b, t.size))
        e = ls_estimate(t, y) - x
        errs.append(e)
        sq.append((e * e).sum(axis=1))
        done += b
    sq = np.concatenate(sq)
    errs = np.concatenate(errs)
    n = sq.size
    return sq.mean(), sq.std(ddof=1) / math.sqrt(n), errs.mean(axis=0), errs.std(axis=0, ddof=1) / math.sqrt(n)


@dataclass(frozen=True)
class EnumerationReport:
    m: int
    grid: int
    minimizer: tuple
    min_risk: float
    all_minimizers_endpoint: bool
    k: int
    k_optimal: int

    @property
    def passed(self):
        return self.all_minimizers_endpoint and self.k == self.k_optimal


def verify_endpoint_optimality(m, grid=10, sigma2=1.0, rtol=1e-12):
    """Exhaustive search over ``{0, 1/g, ..., 1}^m`` up to permutation."""
    if not 2 <= m <= 4 or grid > 12:
        raise ContractError("exhaustive mode is limited to m in {2,3,4} and grid <= 12")
    nodes = np.arange(grid + 1) / grid
    best, best_val, values = None, math.inf, []
    for combo in itertools.combinations_with_replacement(range(grid + 1), m):
        t = nodes[list(combo)]
        try:
            val = risk_exact(t, sigma2)
        except SingularDesignError:
            continue
        values.append((val, combo))
        if val < best_val:
            best, best_val = combo, val
    minimizers = [c for v, c in values if v <= best_val * (1 + rtol)]
    endpoint = all(all(i in (0, grid) for i in c) for c in minimizers)
    k = sum(1 for i in best if i == grid)
    return EnumerationReport(m, grid, tuple(nodes[list(best)]), best_val, endpoint, k, optimal_split(m, sigma2)[0])


def oracle_table(m_values, sigma2=1.0):
    """Rows ``(m, k*, F(k*), k*/m)``."""
    rows = []
    for m in m_values:
        k, F = optimal_split(m, sigma2)
        rows.append({"m": int(m), "k_star": k, "F_k_star": F, "fraction_at_1": k / m})
    return rows
