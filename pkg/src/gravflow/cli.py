"""Command-line front door: generate, validate, fit, compare, bootstrap,
simulate, report, serve.

The CLI stays thin: every number comes from the core modules and lands in
JSON artifacts; the only work done here is argument parsing, file wiring and
table formatting. Exit codes: 0 success, 2 validation failure,
3 non-convergence, 4 I/O error.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from .data import (
    SnapshotFormatError,
    SnapshotValidationError,
    SyntheticConfig,
    generate_synthetic,
    load_snapshot,
    validate_snapshot,
    write_snapshot,
)
from .estimator import (
    DesignError,
    FitError,
    ModelSpec,
    build_design,
    cluster_bootstrap,
    clustered_covariance,
    compare_models,
    eval_metrics,
    fit_negbin,
    fit_ols_log,
    fit_poisson,
    ladder_specs,
)
from .pipeline import (
    bootstrap_to_dict,
    build_manifest,
    comparison_to_dict,
    cost_floor_sensitivity,
    model_from_dict,
    model_to_dict,
    resolve_threads,
    run_scenario_suite,
    summarize_suite,
    system_summary,
    write_json,
)
from .predictor import AugmentationPolicy, ScenarioSpec

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NON_CONVERGENCE = 3
EXIT_IO = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_snapshot_or_exit(path: str):
    try:
        return load_snapshot(path)
    except FileNotFoundError as exc:
        _fail(EXIT_IO, str(exc))
    except SnapshotFormatError as exc:
        if "not found" in str(exc):
            _fail(EXIT_IO, str(exc))
        _fail(EXIT_VALIDATION, str(exc))
    except SnapshotValidationError as exc:
        _fail(EXIT_VALIDATION, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))


def _read_json_or_exit(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        _fail(EXIT_IO, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    except json.JSONDecodeError as exc:
        _fail(EXIT_VALIDATION, f"{path}: invalid JSON ({exc})")


def _parse_seeds(text: str | None) -> tuple[int, ...] | None:
    if not text:
        return None
    text = text.strip()
    if "-" in text and "," not in text:
        lo, hi = text.split("-", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(s) for s in text.split(",") if s.strip())


def _spec_from_options(model_spec: str | None, zero_flow_policy: str | None, cost_floor: float | None) -> ModelSpec:
    spec = ModelSpec.from_dict(_read_json_or_exit(model_spec)) if model_spec else ModelSpec()
    overrides = {}
    if zero_flow_policy:
        overrides["zero_flow_policy"] = zero_flow_policy
    if cost_floor is not None:
        overrides["cost_floor"] = cost_floor
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    try:
        spec.check()
    except ValueError as exc:
        _fail(EXIT_VALIDATION, str(exc))
    return spec


@click.group()
def main():
    """Student flow gravity estimation and policy simulation."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), help="SyntheticConfig JSON file.")
@click.option("--seed", type=int, default=None, help="Override the config RNG seed.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
def generate(config_path, seed, out_dir):
    """Generate a synthetic snapshot with known ground-truth coefficients."""
    raw = _read_json_or_exit(config_path) if config_path else {}
    known = {f.name for f in dataclasses.fields(SyntheticConfig)}
    unknown = set(raw) - known
    if unknown:
        _fail(EXIT_VALIDATION, f"unknown config fields: {sorted(unknown)}")
    if "box_km" in raw:
        raw["box_km"] = tuple(raw["box_km"])
    if "slot_range" in raw:
        raw["slot_range"] = tuple(raw["slot_range"])
    config = SyntheticConfig(**raw)
    if seed is not None:
        config.rng_seed = seed
    try:
        snapshot = generate_synthetic(config)
    except ValueError as exc:
        _fail(EXIT_VALIDATION, str(exc))
    manifest_path = write_snapshot(snapshot, out_dir)
    write_json(
        Path(out_dir) / "run_manifest.json",
        build_manifest("generate", {"config": raw, "seed": config.rng_seed}, {"snapshot": manifest_path}),
    )
    click.echo(f"wrote snapshot to {out_dir} ({len(snapshot.schools)} schools, {len(snapshot.od)} od pairs)")


@main.command()
@click.option("--snapshot", "snapshot_path", required=True, type=click.Path())
def validate(snapshot_path):
    """Validate a snapshot; prints violations and exits 2 when invalid."""
    try:
        snapshot = load_snapshot(snapshot_path)
    except SnapshotValidationError as exc:
        for violation in exc.violations:
            click.echo(f"violation: {violation}")
        sys.exit(EXIT_VALIDATION)
    except (SnapshotFormatError, OSError) as exc:
        _fail(EXIT_IO if "not found" in str(exc) else EXIT_VALIDATION, str(exc))
    violations = validate_snapshot(snapshot)
    for violation in violations:
        click.echo(f"violation: {violation}")
    if violations:
        sys.exit(EXIT_VALIDATION)
    summary = system_summary(snapshot)
    click.echo(
        f"ok: {summary['schools']['origins']} origins, "
        f"{summary['schools']['esc_destinations']} ESC destinations, "
        f"{summary['od_pairs']} od pairs, demand/supply {summary['demand_supply_display']}"
    )


_FAMILIES = {"negbin": fit_negbin, "poisson": fit_poisson, "ols_log": lambda d: fit_ols_log(d)}


@main.command()
@click.option("--snapshot", "snapshot_path", required=True, type=click.Path())
@click.option("--model-spec", "model_spec", type=click.Path(), help="ModelSpec JSON; flags override it.")
@click.option("--zero-flow-policy", type=click.Choice(["positive_only", "include_zeros"]), default=None)
@click.option("--cost-floor", type=float, default=None)
@click.option("--family", type=click.Choice(sorted(_FAMILIES)), default="negbin")
@click.option("--no-cluster", is_flag=True, help="Skip clustered standard errors.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def fit(snapshot_path, model_spec, zero_flow_policy, cost_floor, family, no_cluster, out_dir):
    """Estimate the gravity model and write model.json."""
    snapshot = _load_snapshot_or_exit(snapshot_path)
    spec = _spec_from_options(model_spec, zero_flow_policy, cost_floor)
    try:
        design = build_design(snapshot, spec)
        fitted = _FAMILIES[family](design)
        if not no_cluster and design.n_clusters > 1:
            fitted = clustered_covariance(fitted, design)
    except (DesignError, ValueError) as exc:
        _fail(EXIT_VALIDATION, str(exc))
    except FitError as exc:
        _fail(EXIT_NON_CONVERGENCE, str(exc))
    if not fitted.converged:
        click.echo("error: estimation did not converge", err=True)
        write_json(Path(out_dir) / "model.json", model_to_dict(fitted))
        sys.exit(EXIT_NON_CONVERGENCE)

    metrics = eval_metrics(fitted, design)
    payload = model_to_dict(fitted, metrics)
    if design.floored_rows > 0:
        payload["cost_floor_sensitivity"] = cost_floor_sensitivity(snapshot, spec, fitted)
        click.echo(
            f"note: {design.floored_rows} rows hit the net-cost floor "
            f"({spec.cost_floor}); sensitivity report included in model.json"
        )
    out = Path(out_dir)
    write_json(out / "model.json", payload)
    write_json(
        out / "run_manifest.json",
        build_manifest("fit", {"spec": spec.to_dict(), "family": family}, {"snapshot": snapshot_path}),
    )
    se = fitted.standard_errors()
    z = fitted.z_values()
    p = fitted.p_values()
    click.echo(f"{family}: LL={fitted.log_likelihood:.2f} AIC={fitted.aic:.2f} n={fitted.n_obs}")
    for name in fitted.cov_params:
        value = fitted.coefficients.get(name, fitted.dispersion_alpha or 0.0)
        click.echo(f"  {name:<22} {value:>10.4f}  se={se[name]:.4f}  z={z[name]:.3f}  p={p[name]:.3f}")


@main.command()
@click.option("--snapshot", "snapshot_path", required=True, type=click.Path())
@click.option("--zero-flow-policy", type=click.Choice(["positive_only", "include_zeros"]), default=None)
@click.option("--cost-floor", type=float, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def compare(snapshot_path, zero_flow_policy, cost_floor, out_dir):
    """Fit the stepwise specification ladder and write comparison.json."""
    snapshot = _load_snapshot_or_exit(snapshot_path)
    base = _spec_from_options(None, zero_flow_policy, cost_floor)
    fits = []
    try:
        for label, spec in ladder_specs(base):
            fitted = fit_negbin(build_design(snapshot, spec))
            fitted.label = label
            if not fitted.converged:
                _fail(EXIT_NON_CONVERGENCE, f"ladder step '{label}' did not converge")
            fits.append(fitted)
    except (DesignError, ValueError) as exc:
        _fail(EXIT_VALIDATION, str(exc))
    except FitError as exc:
        _fail(EXIT_NON_CONVERGENCE, str(exc))
    comparison = compare_models(fits)
    out = Path(out_dir)
    write_json(out / "comparison.json", comparison_to_dict(comparison))
    write_json(
        out / "run_manifest.json",
        build_manifest("compare", {"base_spec": base.to_dict()}, {"snapshot": snapshot_path}),
    )
    for row in comparison.rows:
        lrt = f"{row.lrt_stat:.2f}" if row.lrt_stat is not None else "---"
        p = f"{row.p_value:.3f}" if row.p_value is not None else "---"
        click.echo(
            f"{row.label:<26} LL={row.log_likelihood:>12.1f} AIC={row.aic:>12.1f} "
            f"BIC={row.bic:>12.1f} LRT={lrt:>8} p={p:>6} alpha={row.dispersion_alpha:.4f}"
        )


@main.command()
@click.option("--snapshot", "snapshot_path", required=True, type=click.Path())
@click.option("--bootstrap-b", "replicates", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--zero-flow-policy", type=click.Choice(["positive_only", "include_zeros"]), default=None)
@click.option("--cost-floor", type=float, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def bootstrap(snapshot_path, replicates, seed, zero_flow_policy, cost_floor, out_dir):
    """Cluster bootstrap of coefficients and fit metrics; writes bootstrap.json."""
    snapshot = _load_snapshot_or_exit(snapshot_path)
    spec = _spec_from_options(None, zero_flow_policy, cost_floor)
    try:
        report = cluster_bootstrap(snapshot, spec, B=replicates, seed=seed)
    except (DesignError, ValueError) as exc:
        _fail(EXIT_VALIDATION, str(exc))
    except FitError as exc:
        _fail(EXIT_NON_CONVERGENCE, str(exc))
    out = Path(out_dir)
    write_json(out / "bootstrap.json", bootstrap_to_dict(report))
    write_json(
        out / "run_manifest.json",
        build_manifest(
            "bootstrap",
            {"B": replicates, "seed": seed, "spec": spec.to_dict()},
            {"snapshot": snapshot_path},
        ),
    )
    click.echo(f"bootstrap: B={report.B}, failed={report.failed_replicates}")
    for name, (lo, med, hi) in report.coefficients.items():
        click.echo(f"  {name:<22} [{lo:>9.4f}, {med:>9.4f}, {hi:>9.4f}]")


@main.command()
@click.option("--snapshot", "snapshot_path", required=True, type=click.Path())
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--scenarios", "scenarios_path", required=True, type=click.Path())
@click.option("--seeds", "seeds_text", default=None, help="Override scenario seeds: '0-99' or '1,2,3'.")
@click.option("--augment-k", type=int, default=None, help="Max hypothetical pairs per origin.")
@click.option("--augment-cutoff-km", type=float, default=None)
@click.option("--restrict-to-congested-feeders", is_flag=True, default=False)
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--per-seed", is_flag=True, default=False, help="Dump per-seed allocations.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def simulate(
    snapshot_path,
    model_path,
    scenarios_path,
    seeds_text,
    augment_k,
    augment_cutoff_km,
    restrict_to_congested_feeders,
    threads,
    per_seed,
    out_dir,
):
    """Run the counterfactual scenario suite and write per-scenario reports."""
    snapshot = _load_snapshot_or_exit(snapshot_path)
    model_raw = _read_json_or_exit(model_path)
    try:
        fitted = model_from_dict(model_raw)
    except (KeyError, TypeError, ValueError) as exc:
        _fail(EXIT_VALIDATION, f"{model_path}: not a model file ({exc})")
    if not fitted.converged:
        _fail(EXIT_NON_CONVERGENCE, "model file records a non-converged fit")

    scenarios_raw = _read_json_or_exit(scenarios_path)
    entries = scenarios_raw.get("scenarios", scenarios_raw) if isinstance(scenarios_raw, dict) else scenarios_raw
    if not isinstance(entries, list):
        _fail(EXIT_VALIDATION, f"{scenarios_path}: expected a list of scenarios")
    seeds_override = _parse_seeds(seeds_text)
    scenarios = []
    try:
        for raw in entries:
            spec = ScenarioSpec.from_dict(raw)
            if seeds_override:
                spec = dataclasses.replace(spec, seeds=seeds_override)
            scenarios.append(spec)
    except (ValueError, TypeError) as exc:
        _fail(EXIT_VALIDATION, f"bad scenario: {exc}")

    base = AugmentationPolicy()
    policy = AugmentationPolicy(
        max_new_per_origin=augment_k if augment_k is not None else base.max_new_per_origin,
        distance_cutoff_km=augment_cutoff_km if augment_cutoff_km is not None else base.distance_cutoff_km,
        restrict_to_congested_feeders=restrict_to_congested_feeders,
    )
    manifest = build_manifest(
        "simulate",
        {
            "scenarios": [s.to_dict() for s in scenarios],
            "augmentation": policy.to_dict(),
            "threads": resolve_threads(threads),
        },
        {"snapshot": snapshot_path, "model": model_path, "scenarios": scenarios_path},
    )
    try:
        summary = run_scenario_suite(
            snapshot,
            fitted,
            scenarios,
            out_dir,
            policy=policy,
            threads=threads,
            manifest_extra=manifest,
            per_seed=per_seed,
        )
    except (DesignError, KeyError, ValueError) as exc:
        _fail(EXIT_VALIDATION, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    write_json(Path(out_dir) / "run_manifest.json", manifest)
    _echo_summary(summary)


def _echo_summary(summary: dict) -> None:
    click.echo(f"{'scenario':<14} {'predicted':>12} {'vs observed':>12} {'vs reference':>13}")
    for row in summary["rows"]:
        mean = f"{row['predicted_mean']:,.1f}" if row["predicted_mean"] is not None else "---"
        d_obs = row["delta_from_observed"] or "---"
        d_ref = row["delta_from_reference"] or "---"
        click.echo(f"{row['label']:<14} {mean:>12} {d_obs:>12} {d_ref:>13}")


@main.command()
@click.option("--runs", "runs_dir", required=True, type=click.Path(), help="Directory with allocation_*.json files.")
@click.option("--out", "out_path", default=None, type=click.Path())
def report(runs_dir, out_path):
    """Rebuild the suite summary table from per-scenario artifacts."""
    runs = sorted(Path(runs_dir).glob("allocation_*.json"))
    if not runs:
        _fail(EXIT_IO, f"no allocation_*.json files under {runs_dir}")
    reports = [_read_json_or_exit(str(p)) for p in runs]
    observed_total = reports[0].get("observed_total", 0.0)
    summary = summarize_suite(observed_total, reports)
    if out_path:
        write_json(out_path, summary)
    _echo_summary(summary)


@main.command()
@click.option("--snapshot", "snapshot_path", required=True, type=click.Path())
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--serve-port", type=int, default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
def serve(snapshot_path, model_path, serve_port, host):
    """Serve the scenario API over HTTP for the explorer UI."""
    import uvicorn

    from .api import create_app

    snapshot = _load_snapshot_or_exit(snapshot_path)
    fitted = model_from_dict(_read_json_or_exit(model_path))
    if not fitted.converged:
        _fail(EXIT_NON_CONVERGENCE, "model file records a non-converged fit")
    app = create_app(snapshot=snapshot, model=fitted)
    uvicorn.run(app, host=host, port=serve_port)


if __name__ == "__main__":
    main()
