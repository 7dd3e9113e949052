"""File formats: trip and OD tables as CSV, the binary draw store, metric
tables, the diagnostics line stream and the YAML run configuration.

Layouts are documented in docs/FORMATS.md.
"""
from __future__ import annotations

import csv
import dataclasses
import io as _io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .baselines import DEFAULT_PERIODS, Period
from .gibbs import PRESETS, ChainConfig, ODSummary, PosteriorSamples
from .model import KernelSpec, PriorSpec
from .route import InvalidObservationError, RouteConfig, TripObservation, validate_observation

TRIP_COLUMNS = ["trip_id", "departure_epoch_s", "stop_index", "boardings", "alightings"]
SUMMARY_COLUMNS = ["trip_id", "origin", "destination", "mean", "sd", "q025", "q975"]
METRIC_COLUMNS = ["metric", "method", "scope", "value"]

DRAW_MAGIC = b"TODRAWS1"
_HEADER = struct.Struct("<8sIIII")
FLAG_LAMBDA = 1
FLAG_TRIP_IDS = 2


class FormatError(ValueError):
    """Malformed input file; the message names the file and line."""


def _num(x: float) -> str:
    # shortest repr that round-trips exactly
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


def _header_comments(handle) -> tuple[dict, int]:
    """Read leading '# key=value' lines; returns the values and how many
    lines were consumed."""
    meta, n = {}, 0
    while True:
        pos = handle.tell()
        line = handle.readline()
        if not line.startswith("#"):
            handle.seek(pos)
            return meta, n
        n += 1
        body = line[1:].strip()
        if "=" in body:
            k, v = body.split("=", 1)
            meta[k.strip()] = v.strip()


def _open_csv(path, columns):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    handle = open(path, newline="")
    meta, skipped = _header_comments(handle)
    reader = csv.reader(handle)
    try:
        header = next(reader)
    except StopIteration:
        handle.close()
        raise FormatError(f"{path}: empty file, expected header {','.join(columns)}") from None
    if [h.strip() for h in header] != columns:
        handle.close()
        raise FormatError(
            f"{path}:{skipped + 1}: expected header {','.join(columns)}, got {','.join(header)}"
        )
    return handle, reader, meta, skipped + 1


# ---------------------------------------------------------------- trips

def write_trips(trips: Sequence[TripObservation], path, epoch: str | None = None) -> None:
    with open(path, "w", newline="") as f:
        if epoch is not None:
            f.write(f"# epoch={epoch}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRIP_COLUMNS)
        for obs in trips:
            for j in range(obs.S):
                w.writerow([obs.trip_id, _num(obs.t), j + 1, int(obs.u[j]), int(obs.v[j])])


def read_trips(path, return_epoch: bool = False):
    """Parse and validate a trip CSV; trips come back sorted by departure.

    Raises FormatError (with line number) for malformed rows and
    InvalidObservationError naming the trip for inconsistent counts.
    """
    handle, reader, meta, lineno = _open_csv(path, TRIP_COLUMNS)
    rows: dict[str, dict] = {}
    order = []
    with handle:
        for row in reader:
            lineno += 1
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(TRIP_COLUMNS):
                raise FormatError(f"{path}:{lineno}: expected {len(TRIP_COLUMNS)} fields, got {len(row)}")
            tid = row[0].strip()
            try:
                t = float(row[1])
                stop, b, a = int(row[2]), int(row[3]), int(row[4])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            if not math.isfinite(t):
                raise FormatError(f"{path}:{lineno}: departure time must be finite")
            rec = rows.get(tid)
            if rec is None:
                rec = rows[tid] = {"t": t, "u": [], "v": [], "line": lineno}
                order.append(tid)
            elif rec["t"] != t:
                raise FormatError(f"{path}:{lineno}: trip {tid!r} changes departure time")
            if stop != len(rec["u"]) + 1:
                raise FormatError(
                    f"{path}:{lineno}: trip {tid!r} expected stop_index {len(rec['u']) + 1}, got {stop}"
                )
            rec["u"].append(b)
            rec["v"].append(a)

    trips = []
    for tid in order:
        rec = rows[tid]
        obs = TripObservation(tid, rec["u"], rec["v"], rec["t"])
        bad = validate_observation(obs)
        if bad:
            raise InvalidObservationError(tid, bad)
        trips.append(obs)
    if trips and len({o.S for o in trips}) > 1:
        raise FormatError(f"{path}: trips have differing stop counts")
    trips.sort(key=lambda o: o.t)
    return (trips, meta.get("epoch")) if return_epoch else trips


# ---------------------------------------------------------------- OD tables

def write_od_table(path, trip_ids: Sequence[str], route: RouteConfig, values,
                   value_name: str = "count") -> None:
    """One row per trip and OD pair (origin < destination, 1-based)."""
    X = np.asarray(values).reshape(len(trip_ids), route.M)
    integer = np.issubdtype(X.dtype, np.integer)
    with open(path, "w", newline="") as f:
        f.write(f"# stops={route.S}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["trip_id", "origin", "destination", value_name])
        for n, tid in enumerate(trip_ids):
            for m in range(route.M):
                val = int(X[n, m]) if integer else _num(X[n, m])
                w.writerow([tid, route.origins[m] + 1, route.destinations[m] + 1, val])


def read_od_table(path, value_name: str | None = None) -> tuple[list, RouteConfig, np.ndarray]:
    """Inverse of write_od_table; returns trip ids, route and (N, M) values.

    Integer-valued columns come back as int64.  Pairs missing from the file
    are zero.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    with open(path, newline="") as f:
        meta, skipped = _header_comments(f)
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or len(header) != 4 or header[:3] != ["trip_id", "origin", "destination"]:
            raise FormatError(f"{path}:{skipped + 1}: expected header trip_id,origin,destination,<value>")
        if value_name is not None and header[3] != value_name:
            raise FormatError(f"{path}:{skipped + 1}: expected value column {value_name!r}, got {header[3]!r}")
        ids, recs = [], []
        lineno = skipped + 1
        for row in reader:
            lineno += 1
            if not row:
                continue
            try:
                o, d, val = int(row[1]), int(row[2]), row[3]
                float(val)
            except (ValueError, IndexError) as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            if not 1 <= o < d:
                raise FormatError(f"{path}:{lineno}: need 1 <= origin < destination, got {o},{d}")
            if not ids or ids[-1] != row[0]:
                if row[0] in ids:
                    raise FormatError(f"{path}:{lineno}: rows of trip {row[0]!r} are not contiguous")
                ids.append(row[0])
            recs.append((len(ids) - 1, o, d, val, lineno))
    S = int(meta["stops"]) if "stops" in meta else max((r[2] for r in recs), default=2)
    route = RouteConfig(S)
    integer = all(_is_int(r[3]) for r in recs)
    X = np.zeros((len(ids), route.M), dtype=np.int64 if integer else float)
    for n, o, d, val, lineno in recs:
        if d > S:
            raise FormatError(f"{path}:{lineno}: destination {d} beyond stop count {S}")
        X[n, route.flat_index(o, d)] = int(val) if integer else float(val)
    return ids, route, X


def _is_int(s: str) -> bool:
    try:
        int(s)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------- posterior

def write_summary(summary: ODSummary, path) -> None:
    route = summary.route
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for n, tid in enumerate(summary.trip_ids):
            for m in range(route.M):
                w.writerow([
                    tid, route.origins[m] + 1, route.destinations[m] + 1,
                    _num(summary.mean[n, m]), _num(summary.sd[n, m]),
                    _num(summary.q025[n, m]), _num(summary.q975[n, m]),
                ])


def read_summary(path, S: int | None = None) -> ODSummary:
    handle, reader, _, lineno = _open_csv(path, SUMMARY_COLUMNS)
    ids, recs = [], []
    with handle:
        for row in reader:
            lineno += 1
            if not row:
                continue
            try:
                o, d = int(row[1]), int(row[2])
                vals = [float(x) for x in row[3:7]]
            except (ValueError, IndexError) as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            if not ids or ids[-1] != row[0]:
                ids.append(row[0])
            recs.append((len(ids) - 1, o, d, vals))
    S = S or max((r[2] for r in recs), default=2)
    route = RouteConfig(S)
    arr = np.zeros((4, len(ids), route.M))
    for n, o, d, vals in recs:
        arr[:, n, route.flat_index(o, d)] = vals
    return ODSummary(ids, route, arr[0], arr[1], arr[2], arr[3])


def write_posterior(obj, path, include_lambda: bool = True) -> None:
    """Write an ODSummary as CSV, or full PosteriorSamples as a draw store."""
    if isinstance(obj, ODSummary):
        write_summary(obj, path)
    elif isinstance(obj, PosteriorSamples):
        write_draws(obj, path, include_lambda=include_lambda)
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as a posterior file")


@dataclass
class DrawStore:
    S: int
    trip_ids: list
    od_draws: np.ndarray  # (R, N, M) int32
    lambda_draws: np.ndarray | None = None  # (R, N, M) float64


def write_draws(samples: PosteriorSamples, path, include_lambda: bool = True) -> None:
    """Binary draw store, all little-endian:

    header  8s magic, u32 S, u32 N, u32 R, u32 flags
    ids     (flag 2) u32 byte length then UTF-8 trip ids joined by '\\n'
    od      int32[R][N][M]
    lambda  (flag 1) float64[R][N][M]
    """
    od = np.asarray(samples.od_draws)
    R, N, M = od.shape
    if od.size and (od.min() < 0 or od.max() > np.iinfo(np.int32).max):
        raise ValueError("OD counts do not fit in int32")
    flags = FLAG_TRIP_IDS | (FLAG_LAMBDA if include_lambda else 0)
    ids = "\n".join(samples.trip_ids).encode()
    try:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(DRAW_MAGIC, samples.route.S, N, R, flags))
            f.write(struct.pack("<I", len(ids)))
            f.write(ids)
            f.write(od.astype("<i4").tobytes())
            if include_lambda:
                f.write(np.asarray(samples.lambda_draws).astype("<f8").tobytes())
    except OSError as e:
        raise OSError(f"{path}: {e.strerror or e}") from e


def read_draws(path) -> DrawStore:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: too short for a draw store header")
    magic, S, N, R, flags = _HEADER.unpack_from(data)
    if magic != DRAW_MAGIC:
        raise FormatError(f"{path}: not a draw store (bad magic)")
    M = S * (S - 1) // 2
    pos = _HEADER.size
    ids = [f"{n + 1}" for n in range(N)]
    if flags & FLAG_TRIP_IDS:
        (nbytes,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ids = data[pos:pos + nbytes].decode().split("\n") if N else []
        pos += nbytes
    count = R * N * M
    expected = pos + 4 * count + (8 * count if flags & FLAG_LAMBDA else 0)
    if len(data) != expected:
        raise FormatError(f"{path}: size {len(data)} does not match header (expected {expected})")
    od = np.frombuffer(data, dtype="<i4", count=count, offset=pos).reshape(R, N, M).astype(np.int32)
    pos += 4 * count
    lam = None
    if flags & FLAG_LAMBDA:
        lam = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(R, N, M).astype(float)
    return DrawStore(S, ids, od, lam)


# ---------------------------------------------------------------- metrics, diagnostics

def write_metrics(records: Iterable[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({**r, "value": _num(r["value"])})


def read_metrics(path) -> list[dict]:
    handle, reader, _, _ = _open_csv(path, METRIC_COLUMNS)
    with handle:
        return [dict(metric=r[0], method=r[1], scope=r[2], value=float(r[3])) for r in reader if r]


class DiagnosticsWriter:
    """Callable monitor writing one JSON object per sweep and flushing, so
    the file can be followed live."""

    def __init__(self, path):
        self._f = open(path, "w")

    def __call__(self, record: dict) -> None:
        self._f.write(json.dumps({k: _jsonable(v) for k, v in record.items()}) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def read_diagnostics(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------- run configuration

@dataclass
class RunConfig:
    stops: int | None = None
    prior: PriorSpec = field(default_factory=PriorSpec)
    chain: ChainConfig = field(default_factory=ChainConfig)
    periods: tuple = DEFAULT_PERIODS
    paths: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    @property
    def kernel(self) -> KernelSpec:
        return self.prior.kernel

    @property
    def route(self) -> RouteConfig | None:
        return RouteConfig(self.stops) if self.stops else None


_KNOWN = {"stops", "prior", "kernel", "chain", "preset", "periods", "paths", "synth"}


def _build(cls, section: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ValueError(f"config [{where}]: unknown keys {sorted(unknown)}")
    return cls(**section)


def load_config(path) -> RunConfig:
    """Read a YAML run configuration.  Relative paths are resolved against
    the configuration file's directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such config file")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ValueError(f"{path}: invalid YAML: {e}") from None
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return config_from_dict(doc, base=path.parent)


def config_from_dict(doc: dict, base: Path | None = None) -> RunConfig:
    unknown = set(doc) - _KNOWN
    if unknown:
        raise ValueError(f"config: unknown sections {sorted(unknown)}")
    kernel = _build(KernelSpec, doc.get("kernel") or {}, "kernel")
    prior = _build(PriorSpec, {**(doc.get("prior") or {}), "kernel": kernel}, "prior")
    if doc.get("preset") not in (None, *PRESETS):
        raise ValueError(f"config: unknown preset {doc['preset']!r}")
    base_chain = PRESETS[doc["preset"]] if "preset" in doc else ChainConfig()
    chain_over = doc.get("chain") or {}
    bad = set(chain_over) - {f.name for f in dataclasses.fields(ChainConfig)}
    if bad:
        raise ValueError(f"config [chain]: unknown keys {sorted(bad)}")
    chain = dataclasses.replace(base_chain, **chain_over)
    periods = DEFAULT_PERIODS
    if doc.get("periods"):
        periods = tuple(_period(p) for p in doc["periods"])
    paths = {}
    for k, v in (doc.get("paths") or {}).items():
        p = Path(v)
        paths[k] = p if p.is_absolute() or base is None else base / p
    stops = doc.get("stops")
    if stops is not None and int(stops) < 2:
        raise ValueError("config: stops must be at least 2")
    return RunConfig(stops, prior, chain, periods, paths, dict(doc.get("synth") or {}))


def _period(p: dict) -> Period:
    """Periods are given as name plus start/end in hours or seconds."""
    if "start_hour" in p:
        return Period(p["name"], float(p["start_hour"]) * 3600, float(p["end_hour"]) * 3600)
    return Period(p["name"], float(p["start"]), float(p["end"]))


def dump_config(cfg: RunConfig) -> str:
    doc = {
        "stops": cfg.stops,
        "kernel": dataclasses.asdict(cfg.prior.kernel),
        "prior": {k: v for k, v in dataclasses.asdict(cfg.prior).items() if k != "kernel"},
        "chain": dataclasses.asdict(cfg.chain),
        "periods": [{"name": p.name, "start": p.start, "end": p.end} for p in cfg.periods],
        "paths": {k: str(v) for k, v in cfg.paths.items()},
        "synth": cfg.synth,
    }
    buf = _io.StringIO()
    yaml.safe_dump(doc, buf, sort_keys=False)
    return buf.getvalue()
