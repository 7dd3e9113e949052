"""Command-line entry point: ``transit-od``."""
from __future__ import annotations

import dataclasses
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import io as tio
from .baselines import aggregated_ipf, assign_periods, build_seed, journey_ipf, static_model_config
from .evaluation import (
    aggregate_periods,
    crps_ensemble,
    interval_coverage,
    loglik_table_row,
    od_loglik_under_lambda,
    rmse,
)
from .gibbs import PRESETS, posterior_od_summary, run_gibbs
from .route import FeasibleSetTooLarge, InvalidObservationError, RouteConfig
from .synthesis import SynthConfig, synthesize

log = logging.getLogger("transit_od")

# errors that come from user input rather than bugs; reported without a traceback
USER_ERRORS = (ValueError, OSError, InvalidObservationError, FeasibleSetTooLarge, np.linalg.LinAlgError)


class Context:
    def __init__(self, seed, threads, config):
        self.seed = seed
        self.threads = threads
        self.config = tio.load_config(config) if config else tio.RunConfig()


def _path(ctx: Context, given, key: str, what: str, must_exist: bool = True) -> Path:
    p = given or ctx.config.paths.get(key)
    if p is None:
        raise click.UsageError(f"no {what} given (use the option or paths.{key} in the config)")
    p = Path(p)
    if must_exist and not p.exists():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


@click.group()
@click.option("--seed", type=int, default=None, help="Master seed; every random stream derives from it.")
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True,
              help="Worker threads for the OD proposals (results do not depend on it).")
@click.option("--config", type=click.Path(dir_okay=False), default=None, help="YAML run configuration.")
@click.option("-v", "--verbose", is_flag=True, help="Log sampler progress.")
@click.pass_context
def cli(ctx, seed, threads, config, verbose):
    """Bayesian OD estimation for bus routes from boarding/alighting counts."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = Context(seed, threads, config)
    if seed is None:
        ctx.obj.seed = ctx.obj.config.chain.seed


@cli.command()
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.option("--stops", type=click.IntRange(min=3), default=None, help="Stops on the route [8].")
@click.option("--trips", "n_trips", type=click.IntRange(min=1), default=None, help="Journeys [120].")
@click.option("--rank", type=click.IntRange(min=1), default=None, help="Rank of the true logits [2].")
@click.option("--headway", type=float, default=None, help="Seconds between departures [480].")
@click.option("--start", type=float, default=None, help="First departure, seconds since epoch [25200].")
@click.pass_obj
def synth(obj: Context, out_dir, stops, n_trips, rank, headway, start):
    """Draw a synthetic dataset; writes trips.csv and truth.csv."""
    s = dict(obj.config.synth)
    stops = stops or s.pop("stops", None) or obj.config.stops or 8
    s.pop("stops", None)
    kw = {
        "n_trips": n_trips or s.pop("trips", 120),
        "rank": rank or s.pop("rank", 2),
        "headway_seconds": headway if headway is not None else s.pop("headway_seconds", 480.0),
        "service_start": start if start is not None else s.pop("service_start", 7 * 3600.0),
        "boarding_profile": tuple(s.pop("boarding_profile", ())),
        "departure_jitter": s.pop("departure_jitter", 0.0),
    }
    # the generator's temperature prior is separate from the fitting prior:
    # ln rho ~ N(0, 0.01) gives clearly non-uniform alighting patterns
    gen_prior = dataclasses.replace(obj.config.prior, mu_rho=float(s.pop("mu_rho", 0.0)),
                                    sigma2_rho=float(s.pop("sigma2_rho", 0.01)))
    for k in ("trips", "rank", "headway_seconds", "service_start"):
        s.pop(k, None)
    if s:
        raise ValueError(f"config [synth]: unknown keys {sorted(s)}")
    cfg = SynthConfig(RouteConfig(stops), kernel=obj.config.prior.kernel, prior=gen_prior, **kw)
    res = synthesize(cfg, np.random.default_rng(obj.seed))
    out = Path(out_dir or obj.config.paths.get("out_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    tio.write_trips(res.trips, out / "trips.csv", epoch="synthetic")
    tio.write_od_table(out / "truth.csv", [t.trip_id for t in res.trips], cfg.route, res.truth)
    click.echo(f"wrote {len(res.trips)} trips to {out / 'trips.csv'} and {out / 'truth.csv'}")


@cli.command()
@click.option("--trips", "trips_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--rank", type=click.IntRange(min=1), default=None)
@click.option("--burn-in", type=click.IntRange(min=0), default=None)
@click.option("--retained", type=click.IntRange(min=2), default=None)
@click.option("--thin", type=click.IntRange(min=1), default=None)
@click.option("--static", is_flag=True, help="Fit the static model (rank 1, shared lambda).")
@click.option("--draws/--no-draws", default=True, show_default=True, help="Write the binary draw store.")
@click.pass_obj
def fit(obj: Context, trips_path, out_dir, preset, rank, burn_in, retained, thin, static, draws):
    """Run the sampler; writes summary.csv, draws.bin and diagnostics.jsonl."""
    trips = tio.read_trips(_path(obj, trips_path, "trips", "trip file"))
    chain = PRESETS[preset] if preset else obj.config.chain
    over = {k: v for k, v in dict(rank=rank, burn_in=burn_in, retained=retained, thin=thin).items()
            if v is not None}
    chain = dataclasses.replace(chain, seed=obj.seed, **over)
    if static:
        chain = static_model_config(chain)
    if chain.n_draws < 2:
        raise ValueError("need at least two retained draws (retained // thin >= 2)")
    out = Path(out_dir or obj.config.paths.get("out_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    with tio.DiagnosticsWriter(out / "diagnostics.jsonl") as diag:
        samples = run_gibbs(trips, obj.config.prior, chain, threads=obj.threads, monitor=diag)
    tio.write_summary(posterior_od_summary(samples), out / "summary.csv")
    if draws:
        tio.write_draws(samples, out / "draws.bin")
    click.echo(f"{samples.n_draws} draws for {len(trips)} trips; "
               f"mean acceptance {samples.acceptance.mean():.3f}; results in {out}")


@cli.command("ipf")
@click.option("--trips", "trips_path", type=click.Path(dir_okay=False), default=None)
@click.option("--truth", "truth_path", type=click.Path(dir_okay=False), default=None,
              help="True OD table to build period seeds from.")
@click.option("--seeds", "seeds_path", type=click.Path(dir_okay=False), default=None,
              help="Seed table keyed by period name instead of trip id.")
@click.option("--picks", type=click.IntRange(min=1), default=3, show_default=True,
              help="True matrices averaged into each period seed.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Per-trip estimates CSV.")
@click.option("--aggregated-out", type=click.Path(dir_okay=False), default=None,
              help="Also write aggregated IPF per period.")
@click.option("--tol", type=float, default=1e-8, show_default=True)
@click.option("--max-iter", type=click.IntRange(min=1), default=10_000, show_default=True)
@click.pass_obj
def ipf_cmd(obj: Context, trips_path, truth_path, seeds_path, picks, out, aggregated_out, tol, max_iter):
    """Journey-level IPF estimates from period seeds."""
    trips = tio.read_trips(_path(obj, trips_path, "trips", "trip file"))
    periods = obj.config.periods
    route = trips[0].route
    if (truth_path is None) == (seeds_path is None):
        raise click.UsageError("give exactly one of --truth or --seeds")
    if truth_path:
        ids, _, truth = read_aligned(truth_path, trips)
        seeds = build_seed(truth, trips, periods, picks, np.random.default_rng(obj.seed))
    else:
        names, sroute, table = tio.read_od_table(seeds_path)
        if sroute.S != route.S:
            raise ValueError(f"seed table has {sroute.S} stops, trips have {route.S}")
        seeds = {n: route.to_matrix(table[k].astype(float)) for k, n in enumerate(names)}
        used = set(assign_periods(trips, periods)) - {-1}
        missing = [periods[k].name for k in sorted(used) if periods[k].name not in seeds]
        if missing:
            raise ValueError(f"seed table lacks periods {missing}")
    est, results = journey_ipf(trips, seeds, periods, tol, max_iter)
    slow = [trips[n].trip_id for n, r in enumerate(results) if not r.converged]
    if slow:
        click.echo(f"warning: IPF did not converge for {len(slow)} trips: {slow}", err=True)
    tio.write_od_table(out, [t.trip_id for t in trips], route, est, value_name="value")
    if aggregated_out:
        agg = aggregated_ipf(trips, periods, seeds, tol, max_iter)
        tio.write_od_table(aggregated_out, list(agg), route,
                           np.stack([route.to_vector(r.matrix) for r in agg.values()]), value_name="value")
    click.echo(f"wrote IPF estimates for {len(trips)} trips to {out}")


def read_aligned(path, trips):
    """Read an OD table and reorder its rows to match ``trips``."""
    ids, route, X = tio.read_od_table(path)
    if route.S != trips[0].S:
        raise ValueError(f"{path}: {route.S} stops, trips have {trips[0].S}")
    pos = {tid: k for k, tid in enumerate(ids)}
    missing = [t.trip_id for t in trips if t.trip_id not in pos]
    if missing:
        raise ValueError(f"{path}: no rows for trips {missing[:5]}{'...' if len(missing) > 5 else ''}")
    return [t.trip_id for t in trips], route, X[[pos[t.trip_id] for t in trips]]


def _parse_estimate(spec: str):
    if "=" not in spec:
        raise click.BadParameter(f"expected NAME=PATH, got {spec!r}")
    name, path = spec.split("=", 1)
    return name, path


@cli.command("eval")
@click.option("--trips", "trips_path", type=click.Path(dir_okay=False), default=None)
@click.option("--truth", "truth_path", type=click.Path(dir_okay=False), default=None)
@click.option("--summary", "summary_path", type=click.Path(dir_okay=False), default=None,
              help="Posterior summary CSV (RMSE of the mean, interval coverage).")
@click.option("--draws", "draws_path", type=click.Path(dir_okay=False), default=None,
              help="Draw store (CRPS, log-likelihood of the truth).")
@click.option("--estimate", "estimates", multiple=True, help="NAME=PATH point estimate table; repeatable.")
@click.option("--method", default="bayes", show_default=True, help="Label for the posterior rows.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.pass_obj
def eval_cmd(obj: Context, trips_path, truth_path, summary_path, draws_path, estimates, method, out):
    """Score estimates against the true OD table; writes a metrics CSV."""
    trips = tio.read_trips(_path(obj, trips_path, "trips", "trip file"))
    _, route, truth = read_aligned(_path(obj, truth_path, "truth", "truth table"), trips)
    records = []

    def add(metric, meth, value):
        records.append({"metric": metric, "method": meth, "scope": "all", "value": value})

    if summary_path:
        summ = tio.read_summary(summary_path, route.S)
        order = _order(summ.trip_ids, trips, summary_path)
        summ = dataclasses.replace(summ, trip_ids=[summ.trip_ids[k] for k in order],
                                   mean=summ.mean[order], sd=summ.sd[order],
                                   q025=summ.q025[order], q975=summ.q975[order])
        add("rmse", method, rmse(truth, summ.mean))
        add("coverage95", method, interval_coverage(summ, truth))
    if draws_path:
        store = tio.read_draws(draws_path)
        if store.S != route.S:
            raise ValueError(f"{draws_path}: {store.S} stops, trips have {route.S}")
        order = _order(store.trip_ids, trips, draws_path)
        od = store.od_draws[:, order]
        add("crps", method, float(crps_ensemble(od, truth).mean()))
        if not summary_path:
            add("rmse", method, rmse(truth, od.mean(axis=0)))
        if store.lambda_draws is not None:
            mean, sd = loglik_table_row(od_loglik_under_lambda(truth, trips, store.lambda_draws[:, order]))
            add("loglik_mean", method, mean)
            add("loglik_sd", method, sd)
    for spec in estimates:
        name, path = _parse_estimate(spec)
        _, _, est = read_aligned(path, trips)
        add("rmse", name, rmse(truth, est))
    if not records:
        raise click.UsageError("nothing to evaluate: give --summary, --draws or --estimate")
    tio.write_metrics(records, out)
    for r in records:
        click.echo(f"{r['method']:>12s} {r['metric']:<12s} {r['value']:.6g}")


def _order(ids, trips, path):
    pos = {tid: k for k, tid in enumerate(ids)}
    missing = [t.trip_id for t in trips if t.trip_id not in pos]
    if missing:
        raise ValueError(f"{path}: no entries for trips {missing[:5]}")
    return np.array([pos[t.trip_id] for t in trips])


@cli.command()
@click.option("--trips", "trips_path", type=click.Path(dir_okay=False), default=None)
@click.option("--estimates", "est_path", type=click.Path(dir_okay=False), required=True,
              help="Per-trip OD table (counts, IPF values or posterior means).")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.pass_obj
def aggregate(obj: Context, trips_path, est_path, out):
    """Hourly-average OD matrices per time period."""
    trips = tio.read_trips(_path(obj, trips_path, "trips", "trip file"))
    _, route, est = read_aligned(est_path, trips)
    periods = obj.config.periods
    agg = aggregate_periods(est.astype(float), trips, periods)
    if agg.unassigned:
        click.echo(f"warning: {len(agg.unassigned)} trips outside every period: {agg.unassigned}", err=True)
    names = list(agg.matrices)
    tio.write_od_table(out, names, route, np.stack([agg.matrices[n] for n in names]), value_name="per_hour")
    counts = np.bincount(assign_periods(trips, periods) + 1, minlength=len(periods) + 1)[1:]
    for p, c in zip(periods, counts):
        click.echo(f"{p.name}: {c} trips")


def main(argv=None) -> int:
    """Run the CLI and return its exit code instead of exiting."""
    try:
        cli.main(args=argv, prog_name="transit-od", standalone_mode=False)
        return 0
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except USER_ERRORS as e:
        click.echo(f"error: {e}", err=True)
        return 2


def run():  # console-script entry
    sys.exit(main())
