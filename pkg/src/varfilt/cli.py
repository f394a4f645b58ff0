"""CLI entry point using Click."""

from __future__ import annotations

import functools
import logging
import os
from pathlib import Path

import click

from varfilt.config import (
    hinf_config_from_settings,
    l2_config_from_settings,
    load_settings,
    resolve_threads,
    save_problem,
)
from varfilt.errors import ArgumentError, VarfiltError
from varfilt.filters import CorrX, FilterKind, HinfConfig

logger = logging.getLogger(__name__)

CORR_X_CHOICES = [c.value for c in CorrX]


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("varfilt").setLevel(level)


def _parse_dims(ctx, param, value):
    if value is None:
        return None
    try:
        dims = [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected a comma-separated list of integers, got {value!r}")
    if not dims or any(n < 1 for n in dims):
        raise click.BadParameter("dimensions must be positive integers")
    return dims


def _parse_filters(ctx, param, value):
    if value is None:
        return None
    try:
        return [FilterKind.parse(part) for part in value.split(",") if part.strip()]
    except ArgumentError as exc:
        raise click.BadParameter(str(exc))


def _check_output(ctx, param, value):
    """Reject an output path whose directory is missing or not writable."""
    if value is None:
        return None
    path = Path(value)
    parent = path.parent if str(path.parent) else Path(".")
    if path.is_dir():
        raise click.BadParameter(f"'{path}' is a directory")
    if not parent.is_dir():
        raise click.BadParameter(f"directory '{parent}' does not exist")
    if not os.access(parent, os.W_OK) or (path.exists() and not os.access(path, os.W_OK)):
        raise click.BadParameter(f"'{path}' is not writable")
    return path


def _reports_errors(func):
    """Turn library errors into one ``error:`` line and exit status 1."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except VarfiltError as exc:
            click.echo(f"error: {exc}", err=True)
            raise SystemExit(1)

    return wrapper


def _hinf_options(func):
    func = click.option(
        "--keep-rank",
        is_flag=True,
        help="Keep the H∞ posterior's rank-1 term instead of its diagonal (needs --corr-x literal or next).",
    )(func)
    func = click.option(
        "--corr-x",
        type=click.Choice(CORR_X_CHOICES),
        default=None,
        help="Input used in the H∞ correction (default from settings).",
    )(func)
    return func


def _hinf_config(settings: dict, corr_x: str | None, keep_rank: bool) -> HinfConfig:
    cfg = hinf_config_from_settings(settings, corr_x=corr_x, diagonalize_posterior=False if keep_rank else None)
    if keep_rank and cfg.corr_x is CorrX.NONE:
        click.echo("warning: --keep-rank has no effect with corr_x=none", err=True)
    return cfg


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for diagnostics.")
@click.option(
    "--settings",
    "settings_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="YAML file merged over the bundled defaults.",
)
@click.option("--threads", type=click.IntRange(min=0), default=None, help="Worker threads (0 = default).")
@click.version_option(package_name="varfilt")
@click.pass_context
def main(ctx, verbose: int, settings_path: Path | None, threads: int | None) -> None:
    """varfilt - variational and H∞ sequential filters with a benchmark harness."""
    _setup_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj["settings"] = load_settings(settings_path)
    ctx.obj["threads"] = threads


@main.command()
@click.option("--dims", callback=_parse_dims, default=None, help="Comma-separated dimensions, e.g. 2,4,8.")
@click.option("--problems", type=click.IntRange(min=1), default=None, help="Problems per dimension.")
@click.option("--steps", type=click.IntRange(min=0), default=None, help="Observations per problem.")
@click.option("--filters", callback=_parse_filters, default=None, help="Comma-separated: kf,viep,l2,vih,l2h.")
@click.option("--seed", type=click.IntRange(0, 2**63 - 1), default=None, help="Master seed.")
@click.option("--out", required=True, callback=_check_output, help="CSV output file.")
@click.option("--svg", callback=_check_output, default=None, help="Optional SVG plot.")
@_hinf_options
@click.pass_context
@_reports_errors
def sweep(ctx, dims, problems, steps, filters, seed, out, svg, corr_x, keep_rank) -> None:
    """Run seeded problems across dimensions and filters; write MSE and WCSE summaries."""
    from varfilt.export import write_sweep_csv, write_sweep_svg
    from varfilt.harness import sweep as run_sweep

    settings = ctx.obj["settings"]
    grid = settings.get("sweep", {})
    noise = settings.get("problem", {})
    records = run_sweep(
        dims if dims is not None else [int(n) for n in grid.get("dims", [2, 4, 8])],
        problems if problems is not None else int(grid.get("problems", 32)),
        steps if steps is not None else int(grid.get("steps", 1000)),
        filters if filters is not None else [FilterKind.parse(f) for f in grid.get("filters", ["kf"])],
        seed if seed is not None else int(grid.get("seed", 0)),
        _hinf_config(settings, corr_x, keep_rank),
        l2=l2_config_from_settings(settings),
        threads=resolve_threads(ctx.obj["threads"], settings),
        input_var=float(noise.get("input_var", 0.5)),
        meas_var=float(noise.get("meas_var", 0.1)),
        prior_var=float(noise.get("prior_var", 1.0)),
    )
    write_sweep_csv(records, out)
    if svg is not None:
        write_sweep_svg(records, svg)
    click.echo(f"{len(records)} records written to {out}")


@main.command()
@click.option("--filter", "kind", default="viep", help="Filter: kf, viep, l2, vih or l2h.")
@click.option("--dim", type=click.IntRange(min=1), default=50, help="Problem dimension.")
@click.option("--steps", type=click.IntRange(min=1), default=1000, help="Observations to assimilate.")
@click.option("--seed", type=click.IntRange(0, 2**63 - 1), default=0, help="Problem seed.")
@click.option("--out", required=True, callback=_check_output, help="CSV output file.")
@_hinf_options
@click.pass_context
@_reports_errors
def trace(ctx, kind, dim, steps, seed, out, corr_x, keep_rank) -> None:
    """Per-step worst-case scaled error of one filter on one problem."""
    from varfilt.export import write_trace_csv
    from varfilt.harness import run_filter
    from varfilt.model import generate_problem

    try:
        kind = FilterKind.parse(kind)
    except ArgumentError as exc:
        raise click.BadParameter(str(exc), param_hint="--filter")
    settings = ctx.obj["settings"]
    noise = settings.get("problem", {})
    spec, truth = generate_problem(
        dim,
        seed,
        horizon=steps,
        input_var=float(noise.get("input_var", 0.5)),
        meas_var=float(noise.get("meas_var", 0.1)),
        prior_var=float(noise.get("prior_var", 1.0)),
    )
    metrics = run_filter(
        spec,
        truth,
        kind,
        _hinf_config(settings, corr_x, keep_rank),
        l2=l2_config_from_settings(settings),
    )
    write_trace_csv(metrics, out)
    click.echo(f"final wcse {metrics.final_wcse:.4g}, final mse {metrics.final_mse:.4g}")


@main.command()
@click.option("--seed", type=click.IntRange(0, 2**63 - 1), default=0, help="Problem seed.")
@click.option("--obs", type=click.IntRange(min=0), default=3, help="Observations before drawing.")
@click.option("--level", type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True), default=None)
@click.option("--points", type=click.IntRange(min=3), default=None, help="Points per ellipse.")
@click.option("--out", required=True, callback=_check_output, help="CSV output file.")
@click.option("--svg", callback=_check_output, default=None, help="Optional SVG plot.")
@click.pass_context
@_reports_errors
def ellipse(ctx, seed, obs, level, points, out, svg) -> None:
    """Confidence ellipses of the exact 2-D posterior and its EP, ELBO and L2 diagonals."""
    from varfilt.export import write_ellipse_csv, write_ellipse_svg
    from varfilt.harness import posterior_ellipses

    section = ctx.obj["settings"].get("ellipse", {})
    ellipses = posterior_ellipses(
        seed,
        obs,
        level if level is not None else float(section.get("level", 0.9)),
        points if points is not None else int(section.get("points", 256)),
    )
    write_ellipse_csv(ellipses, out)
    if svg is not None:
        write_ellipse_svg(ellipses, svg)
    click.echo(f"ellipses written to {out}")


@main.command("problem")
@click.option("--dim", type=click.IntRange(min=1), required=True, help="Problem dimension.")
@click.option("--seed", type=click.IntRange(0, 2**63 - 1), required=True, help="Problem seed.")
@click.option("--steps", type=click.IntRange(min=1), default=1000, help="Horizon.")
@click.option("--out", required=True, callback=_check_output, help="TOML output file.")
@click.pass_context
@_reports_errors
def problem_cmd(ctx, dim, seed, steps, out) -> None:
    """Write the reproduction record of one seeded problem."""
    from varfilt.model import generate_problem

    noise = ctx.obj["settings"].get("problem", {})
    spec, _ = generate_problem(
        dim,
        seed,
        horizon=steps,
        input_var=float(noise.get("input_var", 0.5)),
        meas_var=float(noise.get("meas_var", 0.1)),
        prior_var=float(noise.get("prior_var", 1.0)),
    )
    save_problem(out, spec)
    click.echo(f"Created {out}")
