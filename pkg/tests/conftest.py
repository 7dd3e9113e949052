import itertools

import numpy as np
import pytest

from transit_od.route import RouteConfig, TripObservation, od_to_counts


def compositions(total, parts):
    """All tuples of ``parts`` non-negative ints summing to ``total``."""
    if parts == 0:
        if total == 0:
            yield ()
        return
    for head in range(total + 1):
        for tail in compositions(total - head, parts - 1):
            yield (head,) + tail


def brute_force_feasible(u, v):
    """Feasible OD vectors by splitting every boarding row independently and
    keeping combinations whose column sums match v."""
    S = len(u)
    route = RouteConfig(S)
    rows = [list(compositions(int(u[i]), S - i - 1)) for i in range(S - 1)]
    out = []
    for combo in itertools.product(*rows):
        y = np.array([c for row in combo for c in row], dtype=np.int64)
        if np.array_equal(od_to_counts(y, route)[1], v):
            out.append(y)
    return out


def trip_from_od(y, S, trip_id="t", t=0.0):
    u, v = od_to_counts(np.asarray(y), RouteConfig(S))
    return TripObservation(trip_id, u, v, t)


def random_trip(rng, S, passengers, trip_id="t", t=0.0):
    """Valid trip obtained by dropping ``passengers`` onto random OD pairs."""
    route = RouteConfig(S)
    y = np.bincount(rng.integers(0, route.M, size=passengers), minlength=route.M)
    return trip_from_od(y, S, trip_id, t)


def small_corpus(n=220, seed=11, max_S=5, max_pass=6):
    """Distinct valid observations with S <= max_S and <= max_pass riders."""
    rng = np.random.default_rng(seed)
    seen, out = set(), []
    while len(out) < n:
        S = int(rng.integers(2, max_S + 1))
        obs = random_trip(rng, S, int(rng.integers(0, max_pass + 1)))
        key = (tuple(obs.u), tuple(obs.v))
        if key not in seen:
            seen.add(key)
            out.append(obs)
    return out


def hazard_lambdas(h):
    """Alighting probabilities from per-stop hazards h_2..h_S (h_S = 1).

    Passengers on board leave stop j with probability h_j whatever their
    origin, so lambda_ij = h_j prod_{i<k<j} (1 - h_k).
    """
    h = np.asarray(h, dtype=float)
    S = h.size + 1
    hz = np.concatenate([[0.0], h])  # index = 0-based stop
    hz[-1] = 1.0
    rows = []
    for i in range(S - 1):
        surv, row = 1.0, []
        for j in range(i + 1, S):
            row.append(hz[j] * surv)
            surv *= 1.0 - hz[j]
        rows.append(np.array(row))
    return rows


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
