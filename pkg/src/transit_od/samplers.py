"""Elliptical slice sampling and the shrinking slice sampler for rho."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .model import PriorSpec, log_prior_rho


class SamplerError(RuntimeError):
    pass


def ess_step(current, chol_prior, loglik: Callable, rng: np.random.Generator,
             cur_loglik: float | None = None, return_info: bool = False):
    """One elliptical slice sampling update under a N(0, L L^T) prior.

    ``chol_prior`` is the lower Cholesky factor L, or a scalar standing for
    L = scalar * I.  With ``return_info`` the result is
    (new state, its log-likelihood, log threshold, number of evaluations).
    """
    f = np.asarray(current, dtype=float)
    z = rng.standard_normal(f.shape)
    nu = chol_prior * z if np.ndim(chol_prior) == 0 else chol_prior @ z
    ll = loglik(f) if cur_loglik is None else cur_loglik
    log_c = ll + math.log(rng.random())
    theta = rng.uniform(0.0, 2.0 * math.pi)
    lo, hi = theta - 2.0 * math.pi, theta
    evals = 0
    while True:
        prop = f * math.cos(theta) + nu * math.sin(theta)
        ll_prop = loglik(prop)
        evals += 1
        if math.isnan(ll_prop):
            raise SamplerError("log-likelihood returned NaN inside elliptical slice sampling")
        if ll_prop > log_c:
            break
        if theta < 0.0:
            lo = theta
        else:
            hi = theta
        if hi - lo < 1e-300:
            # The bracket has collapsed onto the current point, which always
            # satisfies the threshold unless log_c equals ll exactly.
            prop, ll_prop = f, ll
            break
        theta = rng.uniform(lo, hi)
    if return_info:
        return prop, ll_prop, log_c, evals
    return prop


def slice_step_rho(rho: float, loglik_of_rho: Callable, prior: PriorSpec, eps: float,
                   rng: np.random.Generator, cur_loglik: float | None = None,
                   return_info: bool = False):
    """Shrinking slice sampler for the softmax temperature.

    The slice is placed over rho itself, so the prior term is the
    log-normal density including its 1/rho Jacobian.  Proposals at or
    below zero have zero prior mass and only shrink the bracket.
    """
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    ll = loglik_of_rho(rho) if cur_loglik is None else cur_loglik
    log_c = ll + log_prior_rho(rho, prior) + math.log(rng.random())
    kappa = rng.uniform(0.0, eps)
    lo = rho - kappa
    hi = lo + eps
    while True:
        prop = rng.uniform(lo, hi)
        lp = log_prior_rho(prop, prior)
        if lp == -math.inf:
            ll_prop = -math.inf
        else:
            ll_prop = loglik_of_rho(prop)
            if math.isnan(ll_prop):
                raise SamplerError("log-likelihood returned NaN inside slice sampling")
        if ll_prop + lp > log_c:
            break
        if prop < rho:
            lo = prop
        else:
            hi = prop
        if hi - lo < 1e-14 * max(rho, 1.0):
            prop, ll_prop = rho, ll
            break
    if return_info:
        return prop, ll_prop, log_c
    return prop
