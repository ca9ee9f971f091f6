"""Command-line front door for the two-phase workflow.

Every subcommand is a thin wrapper over one pipeline call: it loads the
workspace, runs the operation, writes machine-readable artifacts, and maps
errors onto stable exit codes so shell scripts can branch on the outcome.

Exit codes: 0 ok, 1 validation or user error, 2 I/O or format error,
3 no metric survived the offline correlation check.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import os
import sys
from pathlib import Path

import click

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from .errors import GistError, NoUsableProxy, OutOfRange
from .pipeline import (
    PROPERTIES,
    EfficiencyInput,
    OfflineOptions,
    Strategy,
    Thresholds,
    efficiency_index,
    fault_dendrogram,
    offline_validate,
    online_select,
    property_scores,
    rank_heatmap,
    similarity_scores,
    top_k_eval,
)
from .properties import fault_type_profiles
from .similarity import METRICS, ScoreCache
from .synth import SynthConfig, generate_benchmark
from .workspace import load_workspace

_CELL_FIELDS = ["metric", "mut", "mut_type", "seed", "tau", "p", "n", "method", "error"]
_AGG_FIELDS = [
    "metric",
    "median_tau",
    "q1",
    "q3",
    "frac_p_lt_005",
    "frac_p_lt_01",
    "frac_significant",
    "mean_rank",
    "n_valid",
    "verdict",
]


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map toolkit errors onto the documented exit codes."""

    @functools.wraps(fn)
    def inner(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NoUsableProxy as exc:
            _fail(str(exc), 3)
        except GistError as exc:
            _fail(str(exc), 1)
        except OSError as exc:
            _fail(str(exc), 2)

    return inner


def _default_jobs() -> int:
    return os.cpu_count() or 1


def _cache() -> ScoreCache | None:
    directory = os.environ.get("GIST_CACHE_DIR")
    return ScoreCache(directory) if directory else None


def _read_config_file(path: str) -> dict:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        _fail(str(exc), 2)
    try:
        if p.suffix == ".json":
            data = json.loads(raw.decode())
        else:
            data = tomllib.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        _fail(f"{p}: {exc}", 2)
    if not isinstance(data, dict):
        _fail(f"{p}: top level must be a table of subcommand tables", 2)
    return data


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _emit_json(payload: dict, out: str | None):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).resolve().write_text(text + "\n")
    else:
        click.echo(text)


def _emit_csv(rows, out: str | None):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    if out:
        Path(out).resolve().write_text(buf.getvalue())
    else:
        click.echo(buf.getvalue(), nl=False)


def _fmt(value, digits=6) -> str:
    return "" if value is None else f"{value:.{digits}f}"


def _check_metric(metric: str):
    if metric not in METRICS:
        raise OutOfRange(f"unknown metric {metric!r}; expected one of {', '.join(METRICS)}")


def _check_property(name: str):
    if name not in PROPERTIES:
        raise OutOfRange(f"unknown property {name!r}; expected one of {', '.join(PROPERTIES)}")


@click.group()
@click.option(
    "--config",
    "config_path",
    default=None,
    metavar="FILE",
    help="TOML or JSON file of per-subcommand flag defaults; explicit flags win.",
)
@click.pass_context
def main(ctx, config_path):
    """Validate similarity metrics as transfer proxies, then pick test sets."""
    if config_path:
        ctx.default_map = _read_config_file(config_path)


@main.command()
@click.argument("root")
@_guarded
def validate(root):
    """Load a workspace and cross-check every declared artifact."""
    ws = load_workspace(Path(root).resolve())
    click.echo(f"ok: {len(ws.model_ids())} models, {len(ws.testsets)} test sets")


@main.command()
@click.argument("root")
@click.option("--property", "property", default="kmnc", show_default=True,
              help="transfer property to correlate against")
@click.option("--metrics", default=",".join(METRICS), show_default=True,
              help="comma-separated metric ids")
@click.option("--alpha", type=float, default=0.1, show_default=True,
              help="significance level for the correlation check")
@click.option("--out", "out", default=None, metavar="DIR",
              help="directory for the report JSON and CSVs")
@click.option("--jobs", type=int, envvar="GIST_JOBS", default=None,
              help="parallel objectives [default: cpu count]")
@click.option("--pretty", is_flag=True, help="also print a per-metric table")
@_guarded
def offline(root, property, metrics, alpha, out, jobs, pretty):
    """Correlate every metric with the transfer property across the zoo."""
    _check_property(property)
    metric_ids = tuple(m for m in (s.strip() for s in metrics.split(",")) if m)
    if not metric_ids:
        raise OutOfRange("--metrics lists no metric ids")
    for m in metric_ids:
        _check_metric(m)
    ws = load_workspace(Path(root).resolve())
    options = OfflineOptions(
        property=property,
        metrics=metric_ids,
        thresholds=Thresholds(alpha=alpha),
        jobs=jobs or _default_jobs(),
    )
    report = offline_validate(ws, options, cache=_cache())
    if out:
        out = Path(out).resolve()
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "offline.json", report.to_dict())
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=_CELL_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(report.csv_rows(ws))
        (out / "offline_cells.csv").write_text(buf.getvalue())
        _emit_csv(_aggregate_rows(report), str(out / "offline_aggregates.csv"))
    click.echo(f"status={report.status} chosen={report.chosen_proxy or '-'}")
    if pretty:
        _echo_aggregate_table(report)
    if report.status == "no_usable_proxy":
        sys.exit(3)


def _aggregate_rows(report) -> list[list]:
    rows = [_AGG_FIELDS]
    for metric in report.metrics:
        a = report.aggregates[metric]
        rows.append([
            metric,
            _fmt(a.median_tau),
            _fmt(a.q1),
            _fmt(a.q3),
            f"{a.frac_p_lt_005:.4f}",
            f"{a.frac_p_lt_01:.4f}",
            f"{a.frac_significant:.4f}",
            _fmt(a.mean_rank, 3),
            a.n_valid,
            "true" if a.verdict else "false",
        ])
    return rows


def _echo_aggregate_table(report):
    click.echo(f"{'metric':8} {'median':>8} {'q1':>8} {'q3':>8} {'sig':>6} {'rank':>6} {'n':>3}  verdict")
    for metric in report.metrics:
        a = report.aggregates[metric]
        click.echo(
            f"{metric:8} {_fmt(a.median_tau, 3):>8} {_fmt(a.q1, 3):>8} {_fmt(a.q3, 3):>8} "
            f"{a.frac_significant:>6.2f} {_fmt(a.mean_rank, 2):>6} {a.n_valid:>3}  "
            + ("pass" if a.verdict else "fail")
        )


@main.command()
@click.argument("root")
@click.option("--mut", required=True, help="model under test")
@click.option("--metric", required=True, help="similarity metric to rank by")
@click.option("--strategy", "strategy", default="top1", show_default=True,
              help="top1 | topn:N | obf:N | ebf:N | random:N[:REPS[:SEED]]")
@click.option("--include-same-type", is_flag=True,
              help="let references of the mut's own type compete")
@click.option("--out", default=None, metavar="FILE", help="write the plan as JSON")
@click.option("--jobs", type=int, envvar="GIST_JOBS", default=None,
              help="parallel scoring [default: cpu count]")
@_guarded
def select(root, mut, metric, strategy, include_same_type, out, jobs):
    """Rank reference test sets for one model and apply a pick strategy."""
    _check_metric(metric)
    strategy = Strategy.parse(strategy)
    ws = load_workspace(Path(root).resolve())
    plan = online_select(
        ws,
        mut,
        metric,
        strategy,
        exclude_same_type=not include_same_type,
        cache=_cache(),
        jobs=jobs or _default_jobs(),
    )
    if out:
        _write_json(Path(out).resolve(), plan.to_dict())
    if strategy.name == "random":
        for draw in plan.chosen:
            click.echo(",".join(draw))
    else:
        for tsid in plan.chosen:
            click.echo(tsid)


@main.command(name="eval")
@click.argument("root")
@click.option("--mut", required=True, help="model whose ranking is scored")
@click.option("--metric", required=True, help="similarity metric to rank by")
@click.option("--k", type=int, default=5, show_default=True, help="ranking depth")
@click.option("--property", "property", default="kmnc", show_default=True,
              help="transfer property used as ground truth")
@click.option("--out", default=None, metavar="FILE", help="write the report as JSON")
@click.option("--pretty", is_flag=True, help="also print the per-rank table")
@_guarded
def eval_cmd(root, mut, metric, k, property, out, pretty):
    """Score the k most similar references by the transfer property."""
    _check_metric(metric)
    _check_property(property)
    ws = load_workspace(Path(root).resolve())
    report = top_k_eval(ws, mut, metric, options=OfflineOptions(property=property),
                        k=k, cache=_cache())
    if out:
        _write_json(Path(out).resolve(), report.to_dict())
    click.echo(
        f"mean_beat_fraction={report.mean_beat_fraction:.6f} "
        f"mean_property={report.mean_property:.6f}"
    )
    if pretty:
        click.echo(f"{'j':>2} {'model':12} {'testset':16} {'property':>9} {'beats':>6}")
        for row in report.rows:
            click.echo(
                f"{row.j:>2} {row.model:12} {row.testset:16} "
                f"{row.property_value:>9.4f} {row.beat_fraction:>6.3f}"
            )


@main.group()
def report():
    """Artifact writers: heatmap CSV, dendrogram JSON, efficiency index."""


@report.command()
@click.argument("root")
@click.option("--metric", default=None, help="similarity metric view")
@click.option("--property", "property", default=None, help="transfer property view")
@click.option("--out", default=None, metavar="FILE", help="write CSV here instead of stdout")
@_guarded
def heatmap(root, metric, property, out):
    """Mean rank each reference type earns per objective type."""
    if (metric is None) == (property is None):
        raise OutOfRange("pass exactly one of --metric or --property")
    ws = load_workspace(Path(root).resolve())
    if metric is not None:
        _check_metric(metric)
        scores = similarity_scores(ws, metric, cache=_cache())
    else:
        _check_property(property)
        scores = property_scores(ws, OfflineOptions(property=property))
    _emit_csv(rank_heatmap(ws, scores, higher_is_better=True).to_csv_rows(), out)


@report.command()
@click.argument("root")
@click.option("--mut", required=True, help="model whose fault view is clustered")
@click.option("--out", default=None, metavar="FILE", help="write JSON here instead of stdout")
@_guarded
def dendrogram(root, mut, out):
    """Average-linkage tree over per-testset fault cluster counts."""
    ws = load_workspace(Path(root).resolve())
    testsets = sorted(ws.testsets)
    run = fault_type_profiles(ws, mut, testsets)
    vectors = {t: run.profiles[t].counts for t in testsets}
    _emit_json(fault_dendrogram(vectors).to_dict(), out)


@report.command()
@click.option("--coverage", type=float, required=True, help="property value achieved")
@click.option("--offline-seconds", type=float, required=True)
@click.option("--online-seconds-per-model", type=float, required=True)
@click.option("--generation-seconds", required=True,
              help="comma-separated per-model test generation times")
@click.option("--out", default=None, metavar="FILE", help="write JSON here instead of stdout")
@_guarded
def efficiency(coverage, offline_seconds, online_seconds_per_model, generation_seconds, out):
    """Cost ratio t and efficiency index r for a selection run."""
    try:
        gens = tuple(float(x) for x in generation_seconds.split(","))
    except ValueError:
        raise OutOfRange(f"--generation-seconds {generation_seconds!r} is not a comma-separated list of numbers") from None
    inp = EfficiencyInput(coverage, offline_seconds, online_seconds_per_model, gens)
    _emit_json(efficiency_index(inp), out)


@main.command()
@click.option("--out", required=True, metavar="DIR", help="workspace directory to create")
@click.option("--n-types", type=int, default=4, show_default=True)
@click.option("--seeds-per-type", type=int, default=3, show_default=True)
@click.option("--feature-dim", type=int, default=24, show_default=True)
@click.option("--n-train", type=int, default=256, show_default=True)
@click.option("--n-test-per-set", type=int, default=192, show_default=True)
@click.option("--type-basis-strength", type=float, default=0.6, show_default=True)
@click.option("--seed-noise", type=float, default=0.02, show_default=True)
@click.option("--fault-rate", type=float, default=0.5, show_default=True)
@click.option("--rng-seed", type=int, default=0, show_default=True)
@_guarded
def synth(out, **kwargs):
    """Generate a synthetic workspace with planted structure."""
    ws = generate_benchmark(SynthConfig(**kwargs), Path(out).resolve())
    click.echo(f"wrote {len(ws.model_ids())} models, {len(ws.testsets)} test sets")


if __name__ == "__main__":
    main()
