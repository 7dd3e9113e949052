"""Synthetic journeys with known OD matrices, drawn from the generative
model: rho, Phi and Psi from their priors, multinomial OD rows, counts
summed from the OD vectors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .model import KernelSpec, LatentState, PriorSpec, kernel_cholesky, lambda_table, n_logit_rows
from .route import RouteConfig, TripObservation, od_to_counts


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``boarding_profile[i]`` is the Poisson mean of boardings at stop i+1;
    its last entry must be 0.  Departures are regular at ``headway_seconds``
    from ``service_start`` (seconds since the epoch), optionally perturbed
    by Gaussian noise of SD ``departure_jitter``.  ``kernel`` drives the GP
    over departure times; ``prior`` supplies the rho and Phi priors.
    """

    route: RouteConfig
    n_trips: int
    rank: int = 2
    kernel: KernelSpec = field(default_factory=KernelSpec)
    prior: PriorSpec = field(default_factory=PriorSpec)
    headway_seconds: float = 480.0
    service_start: float = 7 * 3600.0
    boarding_profile: tuple = ()
    departure_jitter: float = 0.0

    def __post_init__(self):
        profile = tuple(float(b) for b in self.boarding_profile) or _default_profile(self.route.S)
        object.__setattr__(self, "boarding_profile", profile)
        if self.n_trips < 1:
            raise ValueError("n_trips must be at least 1")
        if self.headway_seconds <= 0:
            raise ValueError("headway must be positive")
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if len(profile) != self.route.S or profile[-1] != 0 or min(profile) < 0:
            raise ValueError(
                f"boarding_profile needs {self.route.S} non-negative rates ending in 0"
            )
        if self.departure_jitter < 0:
            raise ValueError("departure_jitter must be non-negative")


def _default_profile(S: int) -> tuple:
    # boardings taper towards the end of the route, about 5 per stop on average
    w = np.linspace(1.5, 0.5, S - 1)
    return tuple(np.round(5.0 * w, 3)) + (0.0,)


class SynthResult(NamedTuple):
    trips: list
    truth: np.ndarray  # (N, M) true OD vectors
    truth_state: LatentState


def departure_times(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    t = cfg.service_start + cfg.headway_seconds * np.arange(cfg.n_trips)
    if cfg.departure_jitter > 0:
        t = np.sort(t + cfg.departure_jitter * rng.standard_normal(cfg.n_trips))
    return t


def draw_state(cfg: SynthConfig, times, rng: np.random.Generator) -> LatentState:
    prior = cfg.prior
    rho = math.exp(prior.mu_rho + math.sqrt(prior.sigma2_rho) * rng.standard_normal())
    Phi = math.sqrt(prior.sigma2_phi) * rng.standard_normal((n_logit_rows(cfg.route.S), cfg.rank))
    L = kernel_cholesky(times - times.min(), cfg.kernel)
    Psi = L @ rng.standard_normal((cfg.n_trips, cfg.rank))
    return LatentState(Phi, Psi, rho)


def synthesize(cfg: SynthConfig, rng: np.random.Generator, state: LatentState | None = None) -> SynthResult:
    """Draw a dataset.  Passing ``state`` skips the parameter draws and
    generates OD vectors from that fixed truth instead."""
    route = cfg.route
    times = departure_times(cfg, rng)
    if state is None:
        state = draw_state(cfg, times, rng)
    elif state.N != cfg.n_trips or state.S != route.S:
        raise ValueError("fixed state does not match the configured route and trip count")
    lam = lambda_table(state, route)

    N = cfg.n_trips
    U = rng.poisson(cfg.boarding_profile, size=(N, route.S))
    Y = np.zeros((N, route.M), dtype=np.int64)
    for i, start in enumerate(route.row_starts):
        block = slice(start, start + route.S - 1 - i)
        p = lam[:, block]
        p = p / p.sum(axis=1, keepdims=True)
        Y[:, block] = rng.multinomial(U[:, i], p)

    u, v = od_to_counts(Y, route)
    width = len(str(N))
    trips = [
        TripObservation(f"T{n + 1:0{width}d}", u[n], v[n], times[n]) for n in range(N)
    ]
    return SynthResult(trips, Y, state)


def empirical_lambdas(truth, trips: Sequence[TripObservation]) -> np.ndarray:
    """Observed alighting shares y_ij / u_i per trip in flat OD layout.

    Rows of boarding stops with no boardings are absent and hold NaN.
    """
    Y = np.asarray(truth, dtype=float)
    route = trips[0].route
    U = np.array([t.u for t in trips], dtype=float)
    denom = U[:, route.origins]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, Y / np.where(denom > 0, denom, 1.0), np.nan)
