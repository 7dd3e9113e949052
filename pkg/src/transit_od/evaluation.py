"""Point and probabilistic scores for OD estimates, and period roll-ups."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .baselines import Period, assign_periods
from .route import TripObservation

log = logging.getLogger(__name__)


def rmse(truth, estimate) -> float:
    a = np.asarray(truth, dtype=float).ravel()
    b = np.asarray(estimate, dtype=float).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} truths vs {b.size} estimates")
    if a.size == 0:
        raise ValueError("rmse of an empty sequence")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def crps_samples(samples, y: float) -> float:
    """Sample CRPS: mean |X_i - y| - sum_ij |X_i - X_j| / (2 m^2)."""
    x = np.asarray(samples, dtype=float).ravel()
    m = x.size
    if m == 0:
        raise ValueError("CRPS needs at least one sample")
    return float(np.abs(x - y).sum() / m - np.abs(x[:, None] - x[None, :]).sum() / (2 * m * m))


def crps_ensemble(draws, truth) -> np.ndarray:
    """Sample CRPS for many quantities at once; draws along axis 0.

    Uses sum_ij |X_i - X_j| = 2 sum_k (2k - m - 1) X_(k) over the sorted
    draws, so it is O(m log m) per quantity.
    """
    X = np.sort(np.asarray(draws, dtype=float), axis=0)
    m = X.shape[0]
    if m == 0:
        raise ValueError("CRPS needs at least one sample")
    y = np.asarray(truth, dtype=float)
    w = (2 * np.arange(1, m + 1) - m - 1).reshape((m,) + (1,) * (X.ndim - 1))
    pair = 2.0 * (w * X).sum(axis=0)
    return np.abs(X - y).sum(axis=0) / m - pair / (2 * m * m)


def crps_integral_oracle(samples, y: float, grid_step: float = 1e-4, padding: float = 1.0) -> float:
    """CRPS by integrating (F(x) - 1[x >= y])^2 with the empirical CDF F.

    A regular grid is merged with the sample points and y so the
    piecewise-constant integrand is flat on every cell; cells are
    evaluated at their midpoints.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    lo = min(x[0], y) - padding
    hi = max(x[-1], y) + padding
    n = int(math.ceil((hi - lo) / grid_step))
    grid = np.unique(np.concatenate([lo + grid_step * np.arange(n + 1), x, [y, hi]]))
    grid = grid[grid <= hi]
    mid = 0.5 * (grid[:-1] + grid[1:])
    F = np.searchsorted(x, mid, side="right") / x.size
    H = (mid >= y).astype(float)
    return float(np.sum((F - H) ** 2 * np.diff(grid)))


def od_loglik_under_lambda(truth, trips: Sequence[TripObservation], lambda_draws) -> np.ndarray:
    """Log-likelihood of the true OD vectors under each retained draw of the
    alighting probabilities; one value per draw."""
    Y = np.asarray(truth, dtype=float)
    lam = np.asarray(lambda_draws, dtype=float)
    if Y.shape[0] == 0:
        return np.zeros(lam.shape[0] if lam.ndim == 3 else 0)
    if lam.shape[1:] != Y.shape:
        raise ValueError(f"lambda draws {lam.shape} do not match truth {Y.shape}")
    U = np.array([t.u for t in trips], dtype=float)
    const = gammaln(U + 1.0).sum() - gammaln(Y + 1.0).sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(Y > 0, Y * np.log(lam), 0.0)
    return terms.sum(axis=(1, 2)) + const


def loglik_table_row(values) -> tuple[float, float]:
    """Mean and standard deviation (n-1) across draws."""
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class PeriodAggregate:
    matrices: dict  # period name -> (M,) hourly average in flat OD order
    unassigned: list  # trip ids outside every period


def aggregate_periods(od_estimates, trips: Sequence[TripObservation],
                      periods: Sequence[Period]) -> PeriodAggregate:
    """Sum per-trip estimates by departure period and divide by the period
    length in hours."""
    est = np.asarray(od_estimates, dtype=float)
    where = assign_periods(trips, periods)
    for a in range(len(periods)):
        for b in range(a + 1, len(periods)):
            p, q = periods[a], periods[b]
            if p.start < q.end and q.start < p.end:
                raise ValueError(f"periods {p.name!r} and {q.name!r} overlap")
    out = {}
    for k, p in enumerate(periods):
        out[p.name] = est[where == k].sum(axis=0) / p.hours
    unassigned = [trips[n].trip_id for n in np.flatnonzero(where < 0)]
    if unassigned:
        log.warning("%d trips fall outside every period: %s", len(unassigned), unassigned)
    return PeriodAggregate(out, unassigned)


def interval_coverage(summary, truth) -> float:
    """Share of true entries inside [q025, q975], bounds inclusive."""
    lo = np.asarray(summary.q025, dtype=float)
    hi = np.asarray(summary.q975, dtype=float)
    y = np.asarray(truth, dtype=float)
    if lo.shape != y.shape or hi.shape != y.shape:
        raise ValueError(f"interval shape {lo.shape} does not match truth {y.shape}")
    return float(np.mean((y >= lo) & (y <= hi)))


def batch_means_se(chain, n_batches: int = 50) -> float:
    """Monte Carlo standard error of a chain mean by non-overlapping batch
    means (accounts for autocorrelation)."""
    x = np.asarray(chain, dtype=float)
    b = x.size // n_batches
    if b < 1:
        raise ValueError("chain shorter than the number of batches")
    means = x[: b * n_batches].reshape(n_batches, b).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(n_batches))
