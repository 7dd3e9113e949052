"""Route geometry, trip observations and OD-vector plumbing.

Stops are numbered 1..S in docs and files.  Arrays are 0-based internally.
An OD vector is the upper triangle of the S x S OD matrix flattened
row-major: (y_12, ..., y_1S, y_23, ..., y_2S, ..., y_{S-1,S}).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np


class InvalidObservationError(ValueError):
    """Raised when a trip violates the count invariants."""

    def __init__(self, trip_id, violations):
        self.trip_id = trip_id
        self.violations = list(violations)
        detail = "; ".join(v.message for v in self.violations)
        super().__init__(f"trip {trip_id!r} is invalid: {detail}")


class FeasibleSetTooLarge(RuntimeError):
    pass


@dataclass(frozen=True)
class RouteConfig:
    S: int

    def __post_init__(self):
        if int(self.S) != self.S or self.S < 2:
            raise ValueError(f"a route needs at least 2 stops, got S={self.S}")

    @property
    def M(self) -> int:
        return self.S * (self.S - 1) // 2

    @cached_property
    def origins(self) -> np.ndarray:
        """0-based boarding stop of each flat OD index."""
        return np.concatenate([np.full(self.S - i - 1, i) for i in range(self.S - 1)])

    @cached_property
    def destinations(self) -> np.ndarray:
        """0-based alighting stop of each flat OD index."""
        return np.concatenate([np.arange(i + 1, self.S) for i in range(self.S - 1)])

    @cached_property
    def row_starts(self) -> np.ndarray:
        """Flat index where each boarding stop's block begins (length S-1)."""
        sizes = self.S - 1 - np.arange(self.S - 1)
        return np.concatenate([[0], np.cumsum(sizes)[:-1]])

    def flat_index(self, origin: int, destination: int) -> int:
        """0-based array position of the 1-based stop pair (origin, destination)."""
        if not 1 <= origin < destination <= self.S:
            raise ValueError(f"no OD pair ({origin}, {destination}) on a {self.S}-stop route")
        i = origin - 1
        return i * self.S - i * (i + 1) // 2 + (destination - origin - 1)

    def to_matrix(self, y) -> np.ndarray:
        y = np.asarray(y)
        Y = np.zeros(y.shape[:-1] + (self.S, self.S), dtype=y.dtype)
        Y[..., self.origins, self.destinations] = y
        return Y

    def to_vector(self, Y) -> np.ndarray:
        return np.asarray(Y)[..., self.origins, self.destinations]


def _frozen_counts(values) -> np.ndarray:
    arr = np.array(values, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError("count sequences must be one-dimensional")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TripObservation:
    """Boarding/alighting counts of one bus journey.

    ``t`` is the departure time at the first stop in seconds since the
    dataset epoch.
    """

    trip_id: Any
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        u = _frozen_counts(self.u)
        v = _frozen_counts(self.v)
        if u.shape != v.shape:
            raise ValueError(
                f"trip {self.trip_id!r}: {u.size} boarding counts but {v.size} alighting counts"
            )
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "t", float(self.t))

    @property
    def S(self) -> int:
        return self.u.size

    @property
    def route(self) -> RouteConfig:
        return RouteConfig(self.S)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.u, self.v])

    @property
    def passengers(self) -> int:
        return int(self.u.sum())

    def __eq__(self, other):
        if not isinstance(other, TripObservation):
            return NotImplemented
        return (
            self.trip_id == other.trip_id
            and self.t == other.t
            and np.array_equal(self.u, other.u)
            and np.array_equal(self.v, other.v)
        )

    def __hash__(self):
        return hash((self.trip_id, self.t, self.u.tobytes(), self.v.tobytes()))


@dataclass(frozen=True)
class Violation:
    kind: str
    stops: tuple = field(default=())
    message: str = ""


def build_routing_matrix(route: RouteConfig) -> np.ndarray:
    """Binary 2S x M matrix A with x = A y.

    Rows 1..S sum boardings, rows S+1..2S sum alightings.  Rows S and S+1
    are identically zero and kept so row numbers line up with stop numbers.
    """
    S, M = route.S, route.M
    A = np.zeros((2 * S, M), dtype=np.int64)
    cols = np.arange(M)
    A[route.origins, cols] = 1
    A[S + route.destinations, cols] = 1
    return A


def od_to_counts(y, route: RouteConfig) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y)
    if y.shape[-1] != route.M:
        raise ValueError(f"OD vector has length {y.shape[-1]}, expected {route.M}")
    Y = route.to_matrix(y)
    return Y.sum(axis=-1), Y.sum(axis=-2)


def validate_observation(obs: TripObservation) -> list[Violation]:
    """Every broken count invariant of ``obs``; an empty list means valid.

    Besides the occupancy recursion this also requires that the alightings
    at a stop never exceed the load arriving there (v_j <= w_{j-1}); without
    it a trip can have non-negative occupancy yet no feasible OD vector.
    """
    out = []
    u, v = obs.u, obs.v
    S = u.size
    if S < 2:
        return [Violation("too_few_stops", (), f"need at least 2 stops, got {S}")]

    neg_u = tuple(int(i) + 1 for i in np.flatnonzero(u < 0))
    neg_v = tuple(int(i) + 1 for i in np.flatnonzero(v < 0))
    if neg_u:
        out.append(Violation("negative_boardings", neg_u, f"negative boardings at stops {neg_u}"))
    if neg_v:
        out.append(Violation("negative_alightings", neg_v, f"negative alightings at stops {neg_v}"))
    if v[0] != 0:
        out.append(Violation("first_stop_alightings", (1,), f"v_1 = {v[0]} but must be 0"))
    if u[-1] != 0:
        out.append(Violation("last_stop_boardings", (S,), f"u_{S} = {u[-1]} but must be 0"))
    if u.sum() != v.sum():
        out.append(
            Violation("unbalanced", (), f"total boardings {u.sum()} != total alightings {v.sum()}")
        )

    w = np.cumsum(u - v)
    neg_w = tuple(int(i) + 1 for i in np.flatnonzero(w < 0))
    if neg_w:
        out.append(Violation("negative_occupancy", neg_w, f"negative occupancy after stops {neg_w}"))
    arriving = np.concatenate([[0], w[:-1]])
    over = tuple(int(j) + 1 for j in np.flatnonzero(v > arriving))
    if over:
        out.append(
            Violation(
                "alighting_exceeds_load",
                over,
                f"more alightings than passengers on board arriving at stops {over}",
            )
        )
    if w[-1] != 0:
        out.append(Violation("final_occupancy", (S,), f"bus leaves stop {S} with {w[-1]} on board"))
    return out


def check_observation(obs: TripObservation) -> TripObservation:
    violations = validate_observation(obs)
    if violations:
        raise InvalidObservationError(obs.trip_id, violations)
    return obs


def occupancy(obs: TripObservation) -> np.ndarray:
    """Passengers on board after leaving each stop, w_1..w_S."""
    check_observation(obs)
    return np.cumsum(obs.u - obs.v)


def enumerate_feasible(obs: TripObservation, cap: int = 100_000) -> list[np.ndarray]:
    """All non-negative integer OD vectors consistent with ``obs``.

    Meant for testing on small instances.  Raises FeasibleSetTooLarge once
    more than ``cap`` solutions turn up.
    """
    check_observation(obs)
    route = obs.route
    S = route.S
    u, v = obs.u.tolist(), obs.v.tolist()
    found: list[np.ndarray] = []
    Y = np.zeros((S, S), dtype=np.int64)

    def splits(total, bounds):
        # compositions of total with part k in [0, bounds[k]]
        if not bounds:
            if total == 0:
                yield ()
            return
        head, rest = bounds[0], bounds[1:]
        room = sum(rest)
        for h in range(max(0, total - room), min(head, total) + 1):
            for tail in splits(total - h, rest):
                yield (h,) + tail

    def visit(j, onboard):
        if j == S:
            found.append(route.to_vector(Y).copy())
            if len(found) > cap:
                raise FeasibleSetTooLarge(f"more than {cap} feasible OD vectors")
            return
        for alight in splits(v[j], onboard[:j]):
            Y[:j, j] = alight
            nxt = [z - a for z, a in zip(onboard[:j], alight)] + [u[j]]
            visit(j + 1, nxt + [0] * (S - j - 1))
        Y[:j, j] = 0

    visit(1, [u[0]] + [0] * (S - 1))
    return found
