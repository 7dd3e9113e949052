"""Iterative proportional fitting baselines and the static-model preset."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .gibbs import ChainConfig
from .route import TripObservation, check_observation

SEED_OFFSET = 0.01


@dataclass(frozen=True)
class Period:
    name: str
    start: float  # seconds since the dataset epoch
    end: float

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError(f"period {self.name!r} ends before it starts")

    @property
    def hours(self) -> float:
        return (self.end - self.start) / 3600.0

    def contains(self, t: float) -> bool:
        return self.start <= t < self.end


DEFAULT_PERIODS = (
    Period("morning_peak", 7 * 3600, 9 * 3600),
    Period("midday_offpeak", 9 * 3600, 17 * 3600),
    Period("afternoon_peak", 17 * 3600, 19 * 3600),
    Period("evening_offpeak", 19 * 3600, 23 * 3600),
)


def assign_periods(trips: Sequence[TripObservation], periods: Sequence[Period]) -> np.ndarray:
    """Index of the period holding each departure, -1 when none does."""
    out = np.full(len(trips), -1)
    for n, obs in enumerate(trips):
        for k, p in enumerate(periods):
            if p.contains(obs.t):
                out[n] = k
                break
    return out


@dataclass
class IPFResult:
    matrix: np.ndarray
    converged: bool
    iterations: int
    # max |row/column sum - target| after each full iteration
    violations: list = field(default_factory=list)


def feasible_support(u, v) -> np.ndarray:
    """Cells (i, k) that some feasible OD matrix can make positive.

    A passenger can travel i -> k iff someone boards at i, someone alights
    at k, and at no stop strictly between does everyone on board get off.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    S = u.size
    arriving = np.concatenate([[0], np.cumsum(u - v)[:-1]])
    passable = v < arriving  # someone stays on through stop j
    mask = np.zeros((S, S), dtype=bool)
    for i in range(S - 1):
        if u[i] <= 0:
            continue
        for k in range(i + 1, S):
            if v[k] > 0:
                mask[i, k] = True
            if not passable[k]:
                break
    return mask


def _max_violation(Y, u, v):
    return float(max(np.abs(Y.sum(axis=1) - u).max(), np.abs(Y.sum(axis=0) - v).max()))


def ipf(seed, u, v, tol: float = 1e-8, max_iter: int = 10_000, offset: float = SEED_OFFSET) -> IPFResult:
    """Fit an upper-triangular seed matrix to boarding (row) and alighting
    (column) totals.

    ``offset`` (0.01) is added to every cell before fitting so no needed
    cell starts at zero; pass 0 to fit the seed as given.  Cells that no feasible OD matrix can fill (empty rows or columns,
    or trips interrupted by a stop where everyone alights) are held at zero,
    which lets the iteration reach the marginals instead of creeping
    towards them.  Stops once the largest entry change over a row+column
    pass drops below ``tol`` and every marginal is within ``tol * S``.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    seed = np.asarray(seed, dtype=float)
    S = u.size
    if seed.shape != (S, S):
        raise ValueError(f"seed must be {S}x{S}, got {seed.shape}")
    if np.any(seed < 0) or offset < 0:
        raise ValueError("seed entries must be non-negative")
    if not np.isclose(u.sum(), v.sum()):
        raise ValueError(f"boardings ({u.sum():g}) and alightings ({v.sum():g}) do not balance")

    Y = np.where(feasible_support(u, v), np.triu(seed, k=1) + offset, 0.0)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prev = Y.copy()
        rs = Y.sum(axis=1)
        Y *= np.divide(u, rs, out=np.zeros(S), where=rs > 0)[:, None]
        cs = Y.sum(axis=0)
        Y *= np.divide(v, cs, out=np.zeros(S), where=cs > 0)[None, :]
        history.append(_max_violation(Y, u, v))
        # slow linear convergence can leave small steps with marginals still
        # off by more than tol*S, so both conditions are required
        if np.abs(Y - prev).max() < tol and history[-1] <= tol * S:
            converged = True
            break
    return IPFResult(Y, converged, it, history)


def build_seed(truth, trips: Sequence[TripObservation], periods: Sequence[Period] = DEFAULT_PERIODS,
               picks_per_period: int = 3, rng: np.random.Generator | None = None) -> dict:
    """Per period, the average of ``picks_per_period`` randomly chosen true
    OD matrices (as dense S x S arrays).  Periods without trips get no
    seed, since no estimate needs one."""
    rng = rng if rng is not None else np.random.default_rng()
    route = trips[0].route
    Y = route.to_matrix(np.asarray(truth, dtype=float))
    where = assign_periods(trips, periods)
    seeds = {}
    for k, p in enumerate(periods):
        members = np.flatnonzero(where == k)
        if members.size == 0:
            continue
        if members.size < picks_per_period:
            raise ValueError(
                f"period {p.name!r} has {members.size} trips, fewer than the {picks_per_period} needed"
            )
        chosen = rng.choice(members, size=picks_per_period, replace=False)
        seeds[p.name] = Y[chosen].mean(axis=0)
    return seeds


def journey_ipf(trips: Sequence[TripObservation], seeds: Mapping[str, np.ndarray],
                periods: Sequence[Period] = DEFAULT_PERIODS, tol: float = 1e-8,
                max_iter: int = 10_000) -> tuple[np.ndarray, list]:
    """IPF on every trip against its period's seed.

    Returns the (N, M) estimates in flat OD order and the per-trip results.
    """
    route = trips[0].route
    where = assign_periods(trips, periods)
    outside = [trips[n].trip_id for n in np.flatnonzero(where < 0)]
    if outside:
        raise ValueError(f"trips outside every period: {outside}")
    results = []
    for n, obs in enumerate(trips):
        check_observation(obs)
        results.append(ipf(seeds[periods[where[n]].name], obs.u, obs.v, tol, max_iter))
    est = np.stack([route.to_vector(r.matrix) for r in results]) if results else np.zeros((0, route.M))
    return est, results


def aggregated_ipf(trips: Sequence[TripObservation], periods: Sequence[Period],
                   seeds: Mapping[str, np.ndarray], tol: float = 1e-8,
                   max_iter: int = 10_000) -> dict:
    """One IPF per period on the summed boarding/alighting counts."""
    where = assign_periods(trips, periods)
    out = {}
    for k, p in enumerate(periods):
        members = [trips[n] for n in np.flatnonzero(where == k)]
        if not members:
            continue
        u = np.sum([t.u for t in members], axis=0)
        v = np.sum([t.v for t in members], axis=0)
        out[p.name] = ipf(seeds[p.name], u, v, tol, max_iter)
    return out


def static_model_config(base: ChainConfig) -> ChainConfig:
    """Rank-1 model with Psi frozen at ones, so all journeys share lambda."""
    return replace(base, rank=1, static=True, update_psi=False)
