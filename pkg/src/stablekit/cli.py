"""Command-line interface: ``stablekit <command> [options]``."""
from __future__ import annotations

import csv
import json
import math
import os
import sys
from decimal import Decimal, InvalidOperation

import click
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .examples import UnknownModelError, get_model, list_models
from .frozen import TruncationError
from .model import ConfigError, ModelSpec, NumericalParams, model_from_json, validate_model
from .montecarlo import (ThinningError, bin_masses, renewal_check, simulate_paths, total_variation)
from .parametrix import (CouplingError, QuadratureError, SeriesDivergenceError, SingularityError,
                         UnsupportedModelError, condition_integrals, density_at, neumann_density)

EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

NUMERICAL_ERRORS = (SeriesDivergenceError, QuadratureError, SingularityError, TruncationError, ThinningError,
                    UnsupportedModelError, CouplingError, ArithmeticError)


class NumericalFailure(click.ClickException):
    exit_code = EXIT_NUMERICAL


class ConfigFailure(click.ClickException):
    exit_code = EXIT_VALIDATION


# Parsing


def _decimal(text: str, what: str) -> float:
    try:
        return float(Decimal(text.strip()))
    except (InvalidOperation, ValueError):
        raise click.BadParameter(f"{what}: {text!r} is not a decimal number") from None


def parse_grid(spec: str) -> np.ndarray:
    """``lo:hi:N`` -> N equispaced nodes on [lo, hi)."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise click.BadParameter(f"grid {spec!r} must read lo:hi:N")
    lo, hi = _decimal(parts[0], "grid lo"), _decimal(parts[1], "grid hi")
    try:
        n = int(parts[2])
    except ValueError:
        raise click.BadParameter(f"grid point count {parts[2]!r} is not an integer") from None
    if n < 2 or not hi > lo:
        raise click.BadParameter(f"grid {spec!r} needs hi > lo and N >= 2")
    return np.linspace(lo, hi, n, endpoint=False)


def parse_bins(spec: str) -> np.ndarray:
    """``lo:hi:B`` -> B + 1 histogram edges."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise click.BadParameter(f"bins {spec!r} must read lo:hi:B")
    lo, hi, b = _decimal(parts[0], "bins lo"), _decimal(parts[1], "bins hi"), int(parts[2])
    return np.linspace(lo, hi, b + 1)


def parse_times(spec: str) -> list[float]:
    return [_decimal(s, "time") for s in spec.split(",") if s.strip()]


def parse_point(spec: str | None, d: int) -> np.ndarray:
    if spec is None:
        return np.zeros(d)
    vals = [_decimal(s, "point") for s in spec.split(",")]
    if len(vals) != d:
        raise click.BadParameter(f"point {spec!r} needs {d} coordinates")
    return np.array(vals)


def load_model(ref: str, overrides: tuple[str, ...]) -> ModelSpec:
    vals = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigFailure(f"overrides: {item!r} must read key=value")
        k, v = item.split("=", 1)
        vals[k.strip()] = _decimal(v, f"override {k}")
    try:
        if os.path.exists(ref):
            with open(ref) as fh:
                doc = json.load(fh)
            if vals:
                raise ConfigError("overrides", "overrides apply to builtin models only")
            return model_from_json(doc)
        return get_model(ref, vals)
    except (ConfigError, UnknownModelError, json.JSONDecodeError) as exc:
        raise ConfigFailure(str(exc).strip('"')) from None


def load_params(path: str | None) -> NumericalParams:
    if path is None:
        return NumericalParams()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigFailure(f"params: malformed JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigFailure("params: expected a JSON object")
    known = NumericalParams.__dataclass_fields__
    for k in doc:
        if k not in known:
            raise ConfigFailure(f"params.{k}: unknown numerical parameter")
    return NumericalParams(**doc)


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("STABLEKIT_SEED")
    if env is None:
        raise ConfigFailure("seed: pass --seed or set STABLEKIT_SEED")
    try:
        return int(env)
    except ValueError:
        raise ConfigFailure(f"seed: STABLEKIT_SEED={env!r} is not an integer") from None


# Output


def provenance(model: ModelSpec, params: NumericalParams | None, seed: int | None = None, **extra) -> dict:
    out = {"version": __version__, "model": model.name, "model_hash": model.digest(), "seed": seed}
    if params is not None:
        out["params"] = params.resolve(model).to_json()
    out.update(extra)
    return out


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(doc) -> str:
    return json.dumps(_plain(doc), indent=2, sort_keys=True)


def write_json(path: str, doc):
    with open(path, "w") as fh:
        fh.write(dumps(doc) + "\n")


def fmt(v: float) -> str:
    return "%.12g" % v


def write_csv(path: str, header: list[str], rows, prov: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    write_json(path + ".json", {"provenance": prov, "columns": header})


def outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def numerical(fn):
    """Map numerical failures to exit code 3 naming the failing term."""
    def wrapper(*a, **kw):
        try:
            return fn(*a, **kw)
        except ConfigError as exc:
            raise ConfigFailure(str(exc)) from None
        except NUMERICAL_ERRORS as exc:
            term = getattr(exc, "term", None)
            label = type(exc).__name__ + (f" [{term}]" if term else "")
            raise NumericalFailure(f"{label}: {exc}") from None
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# Commands

model_opt = click.option("--model", "model_ref", required=True, help="builtin name or path to a model JSON file")
set_opt = click.option("--set", "overrides", multiple=True, help="builtin parameter override key=value")
params_opt = click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False), help="numerical parameters JSON")
out_opt = click.option("--out", "out", default="out", show_default=True, help="output directory")


@click.group()
@click.version_option(__version__, prog_name="stablekit")
@click.option("--threads", type=int, default=None, help="thread count (default STABLEKIT_THREADS or library default)")
@click.pass_context
def cli(ctx, threads):
    """Transition densities of stable-like processes by the parametrix method."""
    if threads is None and os.environ.get("STABLEKIT_THREADS"):
        threads = int(os.environ["STABLEKIT_THREADS"])
    if threads is not None:
        if threads < 1:
            raise click.BadParameter("--threads must be at least 1")
        ctx.with_resource(threadpool_limits(limits=threads))


@cli.command("list-models")
def list_models_cmd():
    """Print the builtin model registry as JSON."""
    click.echo(dumps({"version": __version__, "models": list_models()}))


@cli.command()
@model_opt
@set_opt
@params_opt
@out_opt
@numerical
def validate(model_ref, overrides, params_path, out):
    """Check the model conditions on sample points; exit 2 on failure."""
    model = load_model(model_ref, overrides)
    params = load_params(params_path)
    rep = validate_model(model, params)
    doc = {"provenance": provenance(model, params), **rep.to_json()}
    write_json(os.path.join(outdir(out), "validation.json"), doc)
    click.echo(dumps(doc))
    if not rep.passed:
        sys.exit(EXIT_VALIDATION)


def _density_inputs(model, grid, x):
    """(y grid argument, start points snapped to nodes, axes)."""
    if model.dim == 1:
        if len(grid) != 1:
            raise click.BadParameter("d = 1 takes one --grid")
        return grid[0], _snap([parse_point(x, 1)[0]], grid), grid
    if len(grid) == 1:
        grid = grid * 2
    if len(grid) != 2:
        raise click.BadParameter("d = 2 takes one or two --grid options")
    return (grid[0], grid[1]), _snap([parse_point(x, 2)], grid), grid


def _snap(points, axes):
    """Move start points onto the nearest grid node."""
    out = []
    for p in points:
        p = np.atleast_1d(p)
        out.append(np.array([ax[np.argmin(np.abs(ax - c))] for c, ax in zip(p, axes)]))
    return [o[0] for o in out] if len(axes) == 1 else out


@cli.command()
@model_opt
@set_opt
@params_opt
@click.option("--t", "times", required=True, help="comma-separated times in (0, 1]")
@click.option("--grid", "grid", multiple=True, required=True, help="lo:hi:N per axis")
@click.option("--x", "x", default=None, help="start point (comma-separated); snapped to the grid")
@out_opt
@numerical
def density(model_ref, overrides, params_path, times, grid, x, out):
    """Parametrix density p_t(x, .) on a grid: CSV, report and binary field."""
    model = load_model(model_ref, overrides)
    params = load_params(params_path)
    axes = [parse_grid(g) for g in grid]
    y, xs, axes = _density_inputs(model, axes, x)
    ts = parse_times(times)
    field, rep = neumann_density(model, params, ts, xs, y)
    d = outdir(out)
    prov = provenance(model, params, times=ts, grid=list(grid))
    nodes = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    rows = []
    x0 = np.atleast_1d(xs[0])
    masses = {}
    for t in ts:
        P = density_at(field, t)[0]
        masses[fmt(t)] = float(P.sum() * field.dz)
        for node, v in zip(nodes, np.clip(P, 0.0, None)):
            rows.append([t, *x0.tolist(), *node.tolist(), float(v)])
    xcols = [f"x{k + 1}" for k in range(model.dim)]
    ycols = [f"y{k + 1}" for k in range(model.dim)]
    write_csv(os.path.join(d, "density.csv"), ["t", *xcols, *ycols, "density"], rows, prov)
    field.save(os.path.join(d, "field"), prov)
    doc = {"provenance": prov, "mass": masses, "residual": rep.to_json()}
    write_json(os.path.join(d, "density.json"), doc)
    click.echo(dumps({"mass": masses, "terms": rep.series.get("terms"), "out": d}))


@cli.command()
@model_opt
@set_opt
@params_opt
@click.option("--t", "times", default="0.05,0.1,0.2,0.4,0.8", show_default=True)
@click.option("--grid", "grid", multiple=True, required=True)
@click.option("--x", "x", default=None)
@out_opt
@numerical
def residual(model_ref, overrides, params_path, times, grid, x, out):
    """Residual norms and their fitted decay slopes."""
    model = load_model(model_ref, overrides)
    params = load_params(params_path)
    axes = [parse_grid(g) for g in grid]
    y, xs, axes = _density_inputs(model, axes, x)
    ts = parse_times(times)
    _, rep = neumann_density(model, params, ts, xs, y)
    d = outdir(out)
    prov = provenance(model, params, times=ts, grid=list(grid))
    write_json(os.path.join(d, "residual.json"), {"provenance": prov, **rep.to_json()})
    write_csv(os.path.join(d, "residual.csv"), ["t", "norm_inf1", "norm_sup"],
              [[t, a, b] for t, a, b in zip(rep.times, rep.inf1, rep.sup)], prov)
    click.echo(dumps({"eps_R": rep.eps_R, "eps_R_band": rep.eps_R_band, "eps_R_sup": rep.eps_R_sup, "out": d}))


@cli.command()
@model_opt
@set_opt
@click.option("--x0", default=None, help="start point (comma-separated)")
@click.option("--t", "t", default="1", show_default=True)
@click.option("--h", "h", default=None, help="Euler step (default t/200)")
@click.option("--n", "n", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=None)
@out_opt
@numerical
def simulate(model_ref, overrides, x0, t, h, n, seed, out):
    """Terminal positions of seeded Euler paths."""
    model = load_model(model_ref, overrides)
    seed = resolve_seed(seed)
    T = _decimal(t, "t")
    step = _decimal(h, "h") if h else T / 200
    ens = simulate_paths(model, parse_point(x0, model.dim), T, step, n, seed)
    d = outdir(out)
    prov = provenance(model, None, seed, t=T, h=ens.h, n=n, scheme=ens.scheme)
    cols = [f"x{k + 1}" for k in range(model.dim)]
    write_csv(os.path.join(d, "paths.csv"), ["path", *cols], ([i, *map(float, r)] for i, r in enumerate(ens.terminal)), prov)
    click.echo(dumps({"n": n, "seed": seed, "out": d}))


@cli.command()
@model_opt
@set_opt
@params_opt
@click.option("--t", "t", default="0.5", show_default=True)
@click.option("--grid", "grid", required=True, help="parametrix grid lo:hi:N")
@click.option("--bins", "bins", default="-6:6:64", show_default=True, help="histogram bins lo:hi:B")
@click.option("--n", "n", type=int, default=100_000, show_default=True)
@click.option("--h", "h", default=None)
@click.option("--seed", type=int, default=None)
@out_opt
@numerical
def compare(model_ref, overrides, params_path, t, grid, bins, n, h, seed, out):
    """Total variation between the parametrix density and a Monte Carlo histogram (d = 1)."""
    model = load_model(model_ref, overrides)
    if model.dim != 1:
        raise NumericalFailure("UnsupportedModelError: compare supports d = 1")
    params = load_params(params_path)
    seed = resolve_seed(seed)
    T = _decimal(t, "t")
    y = parse_grid(grid)
    edges = parse_bins(bins)
    x0 = _snap([0.0], [y])[0]
    field, _ = neumann_density(model, params, [T], [x0], y)
    pb = bin_masses(density_at(field, T)[0], y, edges)
    ens = simulate_paths(model, x0, T, _decimal(h, "h") if h else T / 200, n, seed)
    hb = np.histogram(ens.terminal[:, 0], edges)[0] / n
    tv = total_variation(pb, hb)
    d = outdir(out)
    prov = provenance(model, params, seed, t=T, grid=grid, bins=bins, n=n)
    write_csv(os.path.join(d, "compare.csv"), ["lo", "hi", "parametrix", "monte_carlo"],
              [[float(a), float(b), float(p), float(q)] for a, b, p, q in zip(edges[:-1], edges[1:], pb, hb)], prov)
    doc = {"provenance": prov, "total_variation": tv}
    write_json(os.path.join(d, "compare.json"), doc)
    click.echo(dumps({"total_variation": tv, "out": d}))


@cli.command()
@model_opt
@set_opt
@click.option("--kind", type=click.Choice(["e32", "e34", "e36"]), default="e32", show_default=True)
@click.option("--t", "times", default="1,0.5,0.25", show_default=True)
@click.option("--v", "v", default=None, help="evaluation point")
@click.option("--aux", "aux", default=None, help="q for e32, alpha for e34, 'r,alpha' for e36")
@out_opt
@numerical
def conditions(model_ref, overrides, kind, times, v, aux, out):
    """Sweep table of the remainder condition integrals."""
    model = load_model(model_ref, overrides)
    if aux is None:
        aux = {"e32": "0.1", "e34": repr(model.alpha_min), "e36": f"{0.5 / model.alpha_max!r},{model.alpha_min!r}"}[kind]
    vals = [_decimal(s, "aux") for s in aux.split(",")]
    a = tuple(vals) if kind == "e36" else vals[0]
    if kind == "e36" and len(vals) != 2:
        raise click.BadParameter("e36 takes aux 'r,alpha'")
    point = parse_point(v, model.dim)
    results = [condition_integrals(model, kind, t, point, a) for t in parse_times(times)]
    d = outdir(out)
    prov = provenance(model, None, kind=kind, aux=vals)
    write_csv(os.path.join(d, "conditions.csv"), ["t", "value", "fitted_exponent"],
              [[r.t, r.value, r.exponent] for r in results], prov)
    doc = {"provenance": prov, "results": [r.to_json() for r in results]}
    write_json(os.path.join(d, "conditions.json"), doc)
    click.echo(dumps(doc["results"]))


@cli.command()
@model_opt
@set_opt
@params_opt
@click.option("--t", "t", default="0.5", show_default=True)
@click.option("--grid", "grid", default="-32:32:1024", show_default=True)
@click.option("--bins", "bins", default="-4:4:32", show_default=True)
@click.option("--n", "n", type=int, default=200_000, show_default=True)
@click.option("--seed", type=int, default=None)
@out_opt
@numerical
def renewal(model_ref, overrides, params_path, t, grid, bins, n, seed, out):
    """Both sides of the last-tail-jump renewal identity on a histogram grid."""
    model = load_model(model_ref, overrides)
    params = load_params(params_path)
    seed = resolve_seed(seed)
    T = _decimal(t, "t")
    try:
        rep = renewal_check(model, T, (parse_grid(grid), parse_bins(bins)), params, n=n, seed=seed)
    except ValueError as exc:
        raise ConfigFailure(str(exc)) from None
    d = outdir(out)
    prov = provenance(model, params, seed, t=T, grid=grid, bins=bins, n=n)
    write_json(os.path.join(d, "renewal.json"), {"provenance": prov, **rep.to_json()})
    click.echo(dumps({"l1": rep.l1, "l1_relative": rep.l1_relative, "sup": rep.sup,
                      "near_diagonal_mass": rep.near_mass, "out": d}))


def run_command(argv: list[str]) -> int:
    """Run the CLI in-process and return its exit code."""
    try:
        cli.main(args=list(argv), prog_name="stablekit", standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    return 0


def main():
    cli(prog_name="stablekit")


if __name__ == "__main__":
    main()
