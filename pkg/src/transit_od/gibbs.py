"""Metropolis-within-Gibbs sampler for OD vectors and latent parameters."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .model import (
    DatasetLikelihood,
    LatentState,
    PriorSpec,
    compute_G,
    kernel_cholesky,
    n_logit_rows,
    phi_blocks,
)
from .proposal import _draw_matrix, draw_proposals, mh_accept
from .route import RouteConfig, TripObservation, check_observation
from .samplers import ess_step, slice_step_rho

log = logging.getLogger(__name__)

# stream tags mixed into the master seed
_INIT, _OD, _PARAMS, _OD_INIT = 0, 1, 2, 3


@dataclass(frozen=True)
class ChainConfig:
    burn_in: int = 4000
    retained: int = 1000
    thin: int = 1
    od_steps_per_sweep: int = 1
    slice_width_rho: float = 0.5
    seed: int = 0
    rank: int = 4
    update_psi: bool = True
    update_phi: bool = True
    update_rho: bool = True
    # Psi frozen at a column of ones: every trip shares one lambda table
    static: bool = False

    def __post_init__(self):
        if self.burn_in < 0 or self.retained < 1 or self.thin < 1:
            raise ValueError("need burn_in >= 0, retained >= 1 and thin >= 1")
        if self.od_steps_per_sweep < 1:
            raise ValueError("od_steps_per_sweep must be at least 1")
        if self.slice_width_rho <= 0:
            raise ValueError("slice_width_rho must be positive")
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if self.static and self.rank != 1:
            raise ValueError("the static model has rank 1")

    @property
    def sweeps(self) -> int:
        return self.burn_in + self.retained

    @property
    def n_draws(self) -> int:
        return self.retained // self.thin


DESK_SCALE = ChainConfig()
FULL_SCALE = ChainConfig(burn_in=95_000, retained=5_000, thin=1)
PRESETS = {"desk": DESK_SCALE, "full": FULL_SCALE}


@dataclass
class PosteriorSamples:
    """Retained draws.  ``od_draws`` and ``lambda_draws`` are (R, N, M)
    arrays in flat OD order; diagnostics hold one entry per sweep."""

    route: RouteConfig
    trip_ids: list
    od_draws: np.ndarray
    lambda_draws: np.ndarray
    loglik: np.ndarray = field(default_factory=lambda: np.zeros(0))
    acceptance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rho: np.ndarray = field(default_factory=lambda: np.zeros(0))
    final_state: LatentState | None = None

    @property
    def n_draws(self) -> int:
        return self.od_draws.shape[0]


@dataclass(frozen=True)
class ODSummary:
    trip_ids: list
    route: RouteConfig
    mean: np.ndarray
    sd: np.ndarray
    q025: np.ndarray
    q975: np.ndarray


def posterior_od_summary(samples: PosteriorSamples) -> ODSummary:
    """Entrywise posterior mean, sample SD (n-1 denominator) and 2.5%/97.5%
    quantiles (linear interpolation) over the retained draws."""
    draws = np.asarray(samples.od_draws, dtype=float)
    if draws.shape[0] == 0:
        raise ValueError("no retained draws to summarise")
    if draws.shape[0] < 2:
        raise ValueError("need at least two retained draws for a spread estimate")
    q = np.quantile(draws, [0.025, 0.975], axis=0, method="linear")
    return ODSummary(
        trip_ids=list(samples.trip_ids),
        route=samples.route,
        mean=draws.mean(axis=0),
        sd=draws.std(axis=0, ddof=1),
        q025=q[0],
        q975=q[1],
    )


def _psi_sweep(Phi, Psi, rho, ev, chol_K, rng, ll=None):
    G = Phi @ Psi.T
    for d in range(Psi.shape[1]):
        phi_d = Phi[:, d]
        G_rest = G - np.outer(phi_d, Psi[:, d])
        fn = lambda psi: ev(G_rest + np.outer(phi_d, psi), rho)
        Psi[:, d], ll, _, _ = ess_step(Psi[:, d], chol_K, fn, rng, cur_loglik=ll, return_info=True)
        G = G_rest + np.outer(phi_d, Psi[:, d])
    return G, ll


def _phi_sweep(Phi, Psi, rho, ev, sd_phi, rng, ll=None):
    G = Phi @ Psi.T
    for rows in phi_blocks(ev.route.S):
        for d in range(Phi.shape[1]):
            psi_d = Psi[:, d]
            G_rows_rest = G[rows] - np.outer(Phi[rows, d], psi_d)
            work = G.copy()

            def fn(phi):
                work[rows] = G_rows_rest + np.outer(phi, psi_d)
                return ev(work, rho)

            Phi[rows, d], ll, _, _ = ess_step(Phi[rows, d], sd_phi, fn, rng, cur_loglik=ll, return_info=True)
            G[rows] = G_rows_rest + np.outer(Phi[rows, d], psi_d)
    return G, ll


def _evaluator(Y, trips) -> DatasetLikelihood:
    return DatasetLikelihood(np.asarray(Y), trips, trips[0].route)


def update_Psi(state: LatentState, Y, trips: Sequence[TripObservation], chol_K, rng) -> LatentState:
    """ESS update of each temporal factor column in turn (d = 1..D)."""
    Psi = np.array(state.Psi)
    Phi = np.array(state.Phi)
    _psi_sweep(Phi, Psi, state.rho, _evaluator(Y, trips), chol_K, rng)
    return state.with_(Psi=Psi)


def update_Phi(state: LatentState, Y, trips: Sequence[TripObservation], rng,
               prior: PriorSpec | None = None) -> LatentState:
    """ESS update of every (boarding-stop block, column) of Phi with an
    isotropic N(0, sigma0^2) prior."""
    prior = prior or PriorSpec()
    Psi = np.array(state.Psi)
    Phi = np.array(state.Phi)
    _phi_sweep(Phi, Psi, state.rho, _evaluator(Y, trips), math.sqrt(prior.sigma2_phi), rng)
    return state.with_(Phi=Phi)


def od_rng(seed: int, sweep: int, trip: int) -> np.random.Generator:
    """Random stream owned by one trip's OD update in one sweep."""
    return np.random.default_rng([seed, _OD, sweep, trip])


def _draw_all(trips, seed, sweep, steps, threads):
    def work(idx):
        return idx, draw_proposals([trips[n] for n in idx], [od_rng(seed, sweep, n) for n in idx], steps)

    N = len(trips)
    if threads <= 1 or N < 2:
        return draw_proposals(trips, [od_rng(seed, sweep, n) for n in range(N)], steps)
    S = trips[0].S
    props = np.zeros((steps, N, S, S), dtype=np.int64)
    logu = np.zeros((steps, N))
    chunks = np.array_split(np.arange(N), min(threads, N))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for idx, (p, lu) in pool.map(work, chunks):
            props[:, idx] = p
            logu[:, idx] = lu
    return props, logu


def initial_state(trips, prior: PriorSpec, cfg: ChainConfig) -> LatentState:
    rng = np.random.default_rng([cfg.seed, _INIT])
    S, N, D = trips[0].S, len(trips), cfg.rank
    Phi = rng.standard_normal((n_logit_rows(S), D))
    Psi = np.ones((N, 1)) if cfg.static else rng.standard_normal((N, D))
    return LatentState(Phi, Psi, math.exp(prior.mu_rho))


def run_gibbs(
    trips: Sequence[TripObservation],
    prior: PriorSpec | None = None,
    cfg: ChainConfig | None = None,
    threads: int = 1,
    monitor: Callable[[dict], None] | None = None,
    init: LatentState | None = None,
) -> PosteriorSamples:
    """Run the sampler and collect OD and alighting-probability draws.

    Every sweep follows the same order: recompute lambda, MH-update each
    trip's OD vector, record (after burn-in, every ``thin`` sweeps), then
    update Psi, Phi and rho.  All randomness derives from ``cfg.seed``;
    the per-trip OD streams make the result independent of ``threads``.
    """
    prior = prior or PriorSpec()
    cfg = cfg or ChainConfig()
    trips = list(trips)
    if not trips:
        raise ValueError("need at least one trip")
    S = trips[0].S
    for obs in trips:
        if obs.S != S:
            raise ValueError(f"trip {obs.trip_id!r} has {obs.S} stops, expected {S}")
        check_observation(obs)
    route = RouteConfig(S)
    N, M = len(trips), route.M
    U = np.array([t.u for t in trips])
    V = np.array([t.v for t in trips])

    state = init or initial_state(trips, prior, cfg)
    if state.N != N or state.S != S:
        raise ValueError("initial state does not match the data")
    Phi, Psi, rho = np.array(state.Phi), np.array(state.Psi), state.rho
    freeze_psi = cfg.static or not cfg.update_psi
    chol_K = None
    if not freeze_psi:
        times = np.array([t.t for t in trips])
        chol_K = kernel_cholesky(times - times.min(), prior.kernel)
    sd_phi = math.sqrt(prior.sigma2_phi)

    Ydense = np.stack([_draw_matrix(o.u, o.v, np.random.default_rng([cfg.seed, _OD_INIT, n]))
                       for n, o in enumerate(trips)])
    ev = DatasetLikelihood(route.to_vector(Ydense), trips, route)
    param_rng = np.random.default_rng([cfg.seed, _PARAMS])

    R = cfg.n_draws
    od_draws = np.zeros((R, N, M), dtype=np.int64)
    lambda_draws = np.zeros((R, N, M))
    ll_trace = np.zeros(cfg.sweeps)
    acc_trace = np.zeros(cfg.sweeps)
    rho_trace = np.zeros(cfg.sweeps)
    kept = 0
    report_every = max(1, cfg.sweeps // 20)

    for sweep in range(cfg.sweeps):
        G = Phi @ Psi.T
        log_lam = ev.layout.log_lambda(G, rho)
        log_lam_dense = route.to_matrix(log_lam)

        props, logu = _draw_all(trips, cfg.seed, sweep, cfg.od_steps_per_sweep, threads)
        n_acc = 0
        for step in range(cfg.od_steps_per_sweep):
            Ydense, accepted, _ = mh_accept(Ydense, props[step], logu[step], U, V, log_lam_dense)
            n_acc += int(accepted.sum())
        if not (np.array_equal(Ydense.sum(axis=2), U) and np.array_equal(Ydense.sum(axis=1), V)):
            bad = [trips[n].trip_id for n in range(N)
                   if not (np.array_equal(Ydense[n].sum(1), U[n]) and np.array_equal(Ydense[n].sum(0), V[n]))]
            raise RuntimeError(f"OD state became infeasible at sweep {sweep} for trips {bad}")
        Y = route.to_vector(Ydense)
        ev.set_counts(Y)

        since = sweep - cfg.burn_in + 1
        if since > 0 and since % cfg.thin == 0 and kept < R:
            od_draws[kept] = Y
            lambda_draws[kept] = np.exp(log_lam)
            kept += 1

        ll = None
        if not freeze_psi:
            G, ll = _psi_sweep(Phi, Psi, rho, ev, chol_K, param_rng, ll)
        if cfg.update_phi and Phi.shape[0]:
            G, ll = _phi_sweep(Phi, Psi, rho, ev, sd_phi, param_rng, ll)
        if cfg.update_rho:
            rho, ll = slice_step_rho(rho, lambda r: ev(G, r), prior, cfg.slice_width_rho, param_rng,
                                     cur_loglik=ll, return_info=True)[:2]
        if ll is None:
            ll = ev(G, rho)

        ll_trace[sweep] = ll
        acc_trace[sweep] = n_acc / (N * cfg.od_steps_per_sweep)
        rho_trace[sweep] = rho
        if monitor is not None:
            monitor({"iteration": sweep + 1, "loglik": ll, "acceptance": acc_trace[sweep], "rho": rho})
        if (sweep + 1) % report_every == 0:
            log.info("sweep %d/%d loglik=%.2f acc=%.3f rho=%.4f",
                     sweep + 1, cfg.sweeps, ll, acc_trace[sweep], rho)

    return PosteriorSamples(
        route=route,
        trip_ids=[t.trip_id for t in trips],
        od_draws=od_draws,
        lambda_draws=lambda_draws,
        loglik=ll_trace,
        acceptance=acc_trace,
        rho=rho_trace,
        final_state=LatentState(Phi, Psi, rho),
    )
