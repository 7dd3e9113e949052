"""Memoryless (hypergeometric) proposal over feasible OD vectors and the
Metropolis-Hastings update of one trip's OD vector.

At each stop the alighting passengers are a uniform draw without
replacement from everyone on board, so the proposal never depends on the
current state and always lands inside the feasible set.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .route import RouteConfig, TripObservation, check_observation


@dataclass(frozen=True)
class ProposalDraw:
    y_star: np.ndarray
    log_q: float


def _draw_matrix(u: np.ndarray, v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Multivariate hypergeometric split of v_j over boarding groups, realised as
    # sequential univariate draws in increasing boarding-stop order.
    S = u.size
    Y = np.zeros((S, S), dtype=np.int64)
    onboard = [0] * S
    onboard[0] = int(u[0])
    load = onboard[0]
    for j in range(1, S):
        remaining = int(v[j])
        if remaining:
            pool = load
            for i in range(j):
                z = onboard[i]
                if z == 0:
                    continue
                if remaining == pool:
                    take = z
                else:
                    take = int(rng.hypergeometric(z, pool - z, remaining))
                pool -= z
                remaining -= take
                Y[i, j] = take
                onboard[i] = z - take
                if remaining == 0:
                    break
            load -= int(v[j])
        onboard[j] = int(u[j])
        load += onboard[j]
    return Y


def _log_comb(n, k):
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


def log_q_batch(Ydense: np.ndarray, U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Proposal log density of stacked dense OD matrices (N, S, S).

    Replays the on-board recursion: z_ij = u_i - sum_{k<j} y_ik passengers
    from stop i arrive at stop j, and the split at stop j has probability
    prod_i C(z_ij, y_ij) / C(w_{j-1}, v_j).
    """
    Ydense = np.asarray(Ydense, dtype=float)
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    S = U.shape[-1]
    before = np.cumsum(Ydense, axis=-1) - Ydense
    Z = U[..., :, None] - before
    upper = np.triu(np.ones((S, S), dtype=bool), k=1)
    terms = np.where(upper, _log_comb(np.where(upper, Z, 0.0), np.where(upper, Ydense, 0.0)), 0.0)
    arriving = np.cumsum(U - V, axis=-1) - U + V  # w_{j-1}
    return terms.sum(axis=(-2, -1)) - _log_comb(arriving, V).sum(axis=-1)


def _check_feasible(Y: np.ndarray, obs: TripObservation):
    if np.any(Y < 0) or not (
        np.array_equal(Y.sum(axis=1), obs.u) and np.array_equal(Y.sum(axis=0), obs.v)
    ):
        raise ValueError(f"OD vector is infeasible for trip {obs.trip_id!r}")


def proposal_logdensity(y, obs: TripObservation) -> float:
    route = obs.route
    Y = route.to_matrix(np.asarray(y, dtype=np.int64))
    _check_feasible(Y, obs)
    return float(log_q_batch(Y[None], obs.u[None], obs.v[None])[0])


def propose_od(obs: TripObservation, rng: np.random.Generator) -> ProposalDraw:
    check_observation(obs)
    Y = _draw_matrix(obs.u, obs.v, rng)
    log_q = float(log_q_batch(Y[None], obs.u[None], obs.v[None])[0])
    return ProposalDraw(obs.route.to_vector(Y), log_q)


def init_feasible(obs: TripObservation, rng: np.random.Generator) -> np.ndarray:
    return propose_od(obs, rng).y_star


def draw_proposals(trips: Sequence[TripObservation], rngs, steps: int = 1):
    """Proposal matrices and log-uniforms for ``steps`` MH steps per trip.

    Returns (proposals (steps, N, S, S), log_uniforms (steps, N)).  Trip n
    consumes only ``rngs[n]``: proposal then uniform, step after step.
    """
    N = len(trips)
    S = trips[0].S if N else 0
    props = np.zeros((steps, N, S, S), dtype=np.int64)
    logu = np.zeros((steps, N))
    for n, (obs, rng) in enumerate(zip(trips, rngs)):
        for s in range(steps):
            props[s, n] = _draw_matrix(obs.u, obs.v, rng)
            logu[s, n] = np.log(rng.random())
    return props, logu


def trip_loglik_batch(Ydense: np.ndarray, log_lam_dense: np.ndarray) -> np.ndarray:
    """sum_ij y_ij log lambda_ij - log y_ij! per trip.  The u_i! terms are
    omitted; they are identical for every state of a trip."""
    Yf = np.asarray(Ydense, dtype=float)
    with np.errstate(invalid="ignore"):
        hits = np.where(Yf > 0, Yf * log_lam_dense, 0.0)
    return hits.sum(axis=(-2, -1)) - gammaln(Yf + 1.0).sum(axis=(-2, -1))


def mh_accept(Ycur, Yprop, logu, U, V, log_lam_dense):
    """Vectorised MH decision for stacked trips.

    Returns (new dense states, accepted mask, log acceptance ratios).
    """
    ratio = (trip_loglik_batch(Yprop, log_lam_dense) + log_q_batch(Ycur, U, V)) - (
        trip_loglik_batch(Ycur, log_lam_dense) + log_q_batch(Yprop, U, V)
    )
    accepted = logu < ratio
    Ynew = np.where(accepted[:, None, None], Yprop, Ycur)
    return Ynew, accepted, ratio


def dense_log_lambda(lambdas, route: RouteConfig) -> np.ndarray:
    """Dense (..., S, S) log-probabilities from flat (..., M) probabilities
    (or a per-stop list for a single trip).  Off-support cells hold 0."""
    if isinstance(lambdas, (list, tuple)):
        lambdas = np.concatenate([np.asarray(l, dtype=float) for l in lambdas])
    lam = np.asarray(lambdas, dtype=float)
    with np.errstate(divide="ignore"):
        log_lam = np.log(lam)
    return route.to_matrix(log_lam)


def mh_update_od(y_cur, obs: TripObservation, lambdas, rng: np.random.Generator):
    """One MH step for one trip.  Returns (new OD vector, accepted flag)."""
    route = obs.route
    Ycur = route.to_matrix(np.asarray(y_cur, dtype=np.int64))
    _check_feasible(Ycur, obs)
    check_observation(obs)
    props, logu = draw_proposals([obs], [rng], 1)
    Ynew, accepted, _ = mh_accept(
        Ycur[None], props[0], logu[0], obs.u[None], obs.v[None], dense_log_lambda(lambdas, route)[None]
    )
    return route.to_vector(Ynew[0]), bool(accepted[0])


def mh_chain(y0, obs: TripObservation, lambdas, steps: int, rng: np.random.Generator):
    """Run ``steps`` MH updates of one trip at fixed lambda.

    Same transition as repeated mh_update_od calls (and the same random
    stream), but validation and the current state's score are computed once.
    Returns the visited states (steps, M) and the number of acceptances.
    """
    route = obs.route
    check_observation(obs)
    Ycur = route.to_matrix(np.asarray(y0, dtype=np.int64))
    _check_feasible(Ycur, obs)
    log_lam = dense_log_lambda(lambdas, route)[None]
    U, V = obs.u[None], obs.v[None]

    def score(Y):  # l(y) - log q(y)
        return trip_loglik_batch(Y[None], log_lam)[0] - log_q_batch(Y[None], U, V)[0]

    cur = score(Ycur)
    out = np.empty((steps, route.M), dtype=np.int64)
    accepted = 0
    for k in range(steps):
        Yprop = _draw_matrix(obs.u, obs.v, rng)
        logu = np.log(rng.random())
        prop = score(Yprop)
        if logu < prop - cur:
            Ycur, cur = Yprop, prop
            accepted += 1
        out[k] = route.to_vector(Ycur)
    return out, accepted


def log_acceptance_ratio(y_cur, y_prop, obs: TripObservation, lambdas) -> float:
    route = obs.route
    Ycur = route.to_matrix(np.asarray(y_cur))[None]
    Yprop = route.to_matrix(np.asarray(y_prop))[None]
    _, _, ratio = mh_accept(
        Ycur, Yprop, np.zeros(1), obs.u[None], obs.v[None], dense_log_lambda(lambdas, route)[None]
    )
    return float(ratio[0])
