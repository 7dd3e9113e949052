"""Latent parameterisation: softmax alighting probabilities from low-rank
logits, the multinomial likelihood, the squared-exponential GP kernel and
the parameter priors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .route import RouteConfig, TripObservation

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KernelSpec:
    sigma: float = 1.0
    lengthscale: float = 3600.0
    jitter: float | None = None

    def __post_init__(self):
        if self.jitter is None:
            object.__setattr__(self, "jitter", 1e-6 * self.sigma**2)
        if self.sigma <= 0 or self.lengthscale <= 0 or self.jitter <= 0:
            raise ValueError("kernel sigma, lengthscale and jitter must be positive")


@dataclass(frozen=True)
class PriorSpec:
    mu_rho: float = math.log(0.1)
    sigma2_rho: float = 1.0
    sigma2_phi: float = 1.0
    kernel: KernelSpec = field(default_factory=KernelSpec)

    def __post_init__(self):
        if self.sigma2_rho <= 0 or self.sigma2_phi <= 0:
            raise ValueError("prior variances must be positive")


def n_logit_rows(S: int) -> int:
    """Rows of the logit matrix G: (S-2)(S-1)/2."""
    return (S - 2) * (S - 1) // 2


def phi_blocks(S: int) -> list[slice]:
    """Row slices of Phi for boarding stops 1..S-2 (block i has S-i-1 rows)."""
    out, start = [], 0
    for i in range(1, S - 1):
        out.append(slice(start, start + S - i - 1))
        start += S - i - 1
    return out


@dataclass(frozen=True)
class LatentState:
    Phi: np.ndarray
    Psi: np.ndarray
    rho: float

    def __post_init__(self):
        Phi = np.array(self.Phi, dtype=float, ndmin=2)
        Psi = np.array(self.Psi, dtype=float, ndmin=2)
        if Phi.shape[1] != Psi.shape[1]:
            raise ValueError(f"Phi has rank {Phi.shape[1]} but Psi has rank {Psi.shape[1]}")
        S = _stops_from_rows(Phi.shape[0])
        if S is None:
            raise ValueError(f"Phi has {Phi.shape[0]} rows, which is not (S-2)(S-1)/2 for any S")
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        Phi.setflags(write=False)
        Psi.setflags(write=False)
        object.__setattr__(self, "Phi", Phi)
        object.__setattr__(self, "Psi", Psi)
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def S(self) -> int:
        return _stops_from_rows(self.Phi.shape[0])

    @property
    def N(self) -> int:
        return self.Psi.shape[0]

    @property
    def D(self) -> int:
        return self.Phi.shape[1]

    def with_(self, **changes) -> "LatentState":
        return replace(self, **changes)


def _stops_from_rows(rows: int) -> int | None:
    # (S-2)(S-1)/2 = rows; S = 2 gives 0 rows
    S = int(round((3 + math.sqrt(1 + 8 * rows)) / 2))
    return S if n_logit_rows(S) == rows else None


def compute_G(state: LatentState) -> np.ndarray:
    return state.Phi @ state.Psi.T


def softmax_lambda(g_block, rho: float) -> np.ndarray:
    """Alighting probabilities over stops i+1..S from the logits of stops
    i+1..S-1; the last stop is the reference category with logit 0."""
    g = np.asarray(g_block, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite logits")
    z = np.append(rho * g, 0.0)
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


class LogitLayout:
    """Index bookkeeping that maps rows of G onto flat OD positions.

    Used to evaluate every trip's log alighting probabilities at once as an
    (N, M) array aligned with the OD vectors.
    """

    def __init__(self, route: RouteConfig):
        self.route = route
        S = route.S
        dest = route.destinations
        self.free = np.flatnonzero(dest < S - 1)  # flat positions carrying a logit
        self.starts = route.row_starts
        self.segment = route.origins  # boarding-stop id of each flat position

    def log_lambda(self, G: np.ndarray, rho: float) -> np.ndarray:
        """(N, M) log alighting probabilities for logit matrix G (rows x N)."""
        N = G.shape[1]
        z = np.zeros((N, self.route.M))
        z[:, self.free] = rho * G.T
        mx = np.maximum.reduceat(z, self.starts, axis=1)
        z -= mx[:, self.segment]
        lse = np.log(np.add.reduceat(np.exp(z), self.starts, axis=1))
        z -= lse[:, self.segment]
        return z


def lambda_table(state: LatentState, route: RouteConfig | None = None) -> np.ndarray:
    """(N, M) alighting probabilities of every trip, laid out like OD vectors."""
    route = route or RouteConfig(state.S)
    return np.exp(LogitLayout(route).log_lambda(compute_G(state), state.rho))


def lambdas_for_trip(state: LatentState, n: int, route: RouteConfig | None = None) -> list[np.ndarray]:
    """Per boarding stop probability vectors lambda_1..lambda_{S-1} of trip n (0-based)."""
    route = route or RouteConfig(state.S)
    if not 0 <= n < state.N:
        raise IndexError(f"trip index {n} out of range for {state.N} trips")
    g = state.Phi @ state.Psi[n]
    out = [softmax_lambda(g[b], state.rho) for b in phi_blocks(route.S)]
    out.append(np.ones(1))
    return out


def split_rows(flat, route: RouteConfig) -> list[np.ndarray]:
    flat = np.asarray(flat)
    return np.split(flat, route.row_starts[1:], axis=-1)


def multinomial_logpmf(y_row, u_i: int, lam) -> float:
    y = np.asarray(y_row, dtype=np.int64)
    lam = np.asarray(lam, dtype=float)
    if y.shape != lam.shape:
        raise ValueError("count and probability vectors differ in length")
    if y.sum() != u_i:
        raise ValueError(f"row counts sum to {y.sum()}, expected {u_i}")
    if u_i == 0:
        return 0.0
    pos = y > 0
    if np.any(lam[pos] <= 0):
        return -math.inf
    return float(gammaln(u_i + 1) - gammaln(y + 1).sum() + (y[pos] * np.log(lam[pos])).sum())


def _flat_lambdas(lambdas, route: RouteConfig) -> np.ndarray:
    if isinstance(lambdas, np.ndarray) and lambdas.ndim == 1 and lambdas.size == route.M:
        return lambdas
    return np.concatenate([np.asarray(l, dtype=float) for l in lambdas])


def trip_loglik(y, obs: TripObservation, lambdas) -> float:
    """log p(y | lambda) for one trip.  ``lambdas`` is either the list from
    lambdas_for_trip or a flat length-M probability vector."""
    route = obs.route
    y = np.asarray(y, dtype=np.int64)
    Y = route.to_matrix(y)
    if np.any(y < 0) or not (
        np.array_equal(Y.sum(axis=1), obs.u) and np.array_equal(Y.sum(axis=0), obs.v)
    ):
        raise ValueError(f"OD vector is infeasible for trip {obs.trip_id!r}")
    lam = split_rows(_flat_lambdas(lambdas, route), route)
    total = 0.0
    for i, (row, l) in enumerate(zip(split_rows(y, route), lam)):
        if obs.u[i]:
            total += multinomial_logpmf(row, int(obs.u[i]), l)
    return total


def log_factorial(n) -> np.ndarray:
    return gammaln(np.asarray(n, dtype=float) + 1.0)


class DatasetLikelihood:
    """Fast evaluator of sum_n log p(y^n | lambda^n) for fixed OD counts.

    The factorial terms depend only on the counts and are computed once.
    """

    def __init__(self, Y: np.ndarray, trips: Sequence[TripObservation], route: RouteConfig | None = None):
        self.route = route or (trips[0].route if trips else None)
        self.layout = LogitLayout(self.route)
        self.set_counts(Y, trips)

    def set_counts(self, Y, trips=None):
        self.Y = np.asarray(Y, dtype=float).reshape(-1, self.route.M)
        if trips is not None:
            U = np.array([t.u for t in trips], dtype=float).reshape(-1, self.route.S)
            self._u_term = float(log_factorial(U).sum())
        self.const = self._u_term - float(log_factorial(self.Y).sum())

    def from_log_lambda(self, log_lam: np.ndarray) -> float:
        return float(np.einsum("nm,nm->", self.Y, log_lam)) + self.const

    def __call__(self, G: np.ndarray, rho: float) -> float:
        if self.Y.shape[0] == 0:
            return 0.0
        return self.from_log_lambda(self.layout.log_lambda(G, rho))


def dataset_loglik(Y, trips: Sequence[TripObservation], state: LatentState) -> float:
    if len(trips) == 0:
        return 0.0
    route = trips[0].route
    log_lam = LogitLayout(route).log_lambda(compute_G(state), state.rho)
    total = 0.0
    for n, obs in enumerate(trips):
        total += trip_loglik(np.asarray(Y)[n], obs, np.exp(log_lam[n]))
    return total


def kernel_matrix(times, spec: KernelSpec, jitter: float | None = None) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("departure times must be finite")
    d = t[:, None] - t[None, :]
    K = spec.sigma**2 * np.exp(-0.5 * (d / spec.lengthscale) ** 2)
    K[np.diag_indices_from(K)] += spec.jitter if jitter is None else jitter
    return K


def kernel_cholesky(times, spec: KernelSpec) -> np.ndarray:
    """Lower Cholesky factor of the kernel matrix.

    Jitter escalates x10 from ``spec.jitter`` up to 1e-2 sigma^2 when the
    factorisation fails (nearly coincident departures).
    """
    jitter = spec.jitter
    ceiling = 1e-2 * spec.sigma**2
    while True:
        try:
            return np.linalg.cholesky(kernel_matrix(times, spec, jitter))
        except np.linalg.LinAlgError:
            if jitter >= ceiling:
                raise np.linalg.LinAlgError(
                    f"kernel matrix not positive definite even with jitter {jitter:g}"
                ) from None
            jitter = min(jitter * 10.0, ceiling)


def gaussian_logpdf_chol(x: np.ndarray, chol: np.ndarray) -> float:
    """log N(x; 0, L L^T) given the lower factor L."""
    a = solve_triangular(chol, x, lower=True)
    return float(-0.5 * a @ a - np.log(np.diag(chol)).sum() - 0.5 * x.size * LOG_2PI)


def log_prior_rho(rho: float, prior: PriorSpec) -> float:
    """Prior log density of rho on its natural scale (log-normal)."""
    if not rho > 0:
        return -math.inf
    lr = math.log(rho)
    return (
        -0.5 * (lr - prior.mu_rho) ** 2 / prior.sigma2_rho
        - 0.5 * math.log(2 * math.pi * prior.sigma2_rho)
        - lr
    )


def log_prior(state: LatentState, prior: PriorSpec, chol_K: np.ndarray) -> float:
    """Joint prior log density of (Phi, Psi, log rho).

    The rho term is the Gaussian density of log(rho) itself, without the
    1/rho Jacobian (see log_prior_rho for the natural-scale density).
    """
    if not state.rho > 0:
        return -math.inf
    total = sum(gaussian_logpdf_chol(state.Psi[:, d], chol_K) for d in range(state.D))
    s2 = prior.sigma2_phi
    total += float(-0.5 * (state.Phi**2).sum() / s2 - 0.5 * state.Phi.size * math.log(2 * math.pi * s2))
    lr = math.log(state.rho)
    total += -0.5 * (lr - prior.mu_rho) ** 2 / prior.sigma2_rho - 0.5 * math.log(
        2 * math.pi * prior.sigma2_rho
    )
    return total
