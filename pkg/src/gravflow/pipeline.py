"""Scenario orchestration and report assembly shared by the CLI and the service.

Everything emitted here is deterministic for fixed inputs and seeds: JSON is
written with sorted keys and repr-exact floats, aggregation happens in seed
order, and the only non-reproducible field is the manifest timestamp.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .allocation import (
    EXHAUSTIVE_PAIR_LIMIT,
    congested_fractions,
    decompose_paths,
    decongestion_totals,
    run_exhaustive,
    run_monte_carlo,
)
from .data import PAIR_EXISTING, SystemSnapshot
from .estimator import (
    DesignMatrix,
    FittedModel,
    ModelComparison,
    ModelSpec,
    BootstrapReport,
    build_design,
    eval_metrics,
    fit_negbin,
)
from .predictor import (
    AugmentationPolicy,
    ScenarioSpec,
    augment_pairs,
    candidate_pools,
    scenario_predictions,
    unconstrained_predictions,
)
from .rng import PRNG_ID

THREADS_ENV = "GRAVFLOW_THREADS"


def resolve_threads(requested: int | None = None) -> int:
    """Requested worker count, capped by the GRAVFLOW_THREADS env var."""
    cap = os.environ.get(THREADS_ENV)
    threads = requested if requested and requested > 0 else 1
    if cap:
        try:
            threads = min(threads, max(1, int(cap)))
        except ValueError:
            pass
    return threads


# ---------------------------------------------------------------------------
# Formatting
# ---------------------------------------------------------------------------

def format_percent_change(value: float, reference: float) -> str:
    """Signed one-decimal percent change of value vs reference, e.g. '+34.7%'."""
    if reference == 0:
        return "n/a"
    pct = (value - reference) / reference * 100.0
    return f"{pct:+.1f}%"


def format_ratio(numerator: float, denominator: float) -> str:
    if denominator == 0:
        return "n/a"
    return f"{numerator / denominator:.1f}×"


def to_jsonable(value):
    """Recursively convert numpy scalars/arrays so json.dumps output is stable."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path


def sha256_of(path: str | Path) -> str:
    """Content hash of a file, or of a directory's files in sorted order."""
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in files:
        if path.is_dir():
            h.update(str(p.relative_to(path)).encode())
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 16), b""):
                h.update(chunk)
    return h.hexdigest()


def build_manifest(command: str, config: dict, inputs: dict[str, str | Path] | None = None) -> dict:
    return {
        "command": command,
        "config": config,
        "inputs": {name: sha256_of(p) for name, p in (inputs or {}).items()},
        "prng": PRNG_ID,
        "version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }


# ---------------------------------------------------------------------------
# Model (de)serialization
# ---------------------------------------------------------------------------

def model_to_dict(fit: FittedModel, metrics: dict[str, float] | None = None) -> dict:
    return {
        "family": fit.family,
        "label": fit.label,
        "spec": fit.spec.to_dict() if fit.spec else None,
        "columns": fit.columns,
        "coefficients": fit.coefficients,
        "se": fit.standard_errors(),
        "z": fit.z_values(),
        "p": fit.p_values(),
        "dispersion_alpha": fit.dispersion_alpha,
        "alpha_boundary": fit.alpha_boundary,
        "cov_type": fit.cov_type,
        "cov_params": fit.cov_params,
        "covariance": fit.covariance.tolist(),
        "log_likelihood": fit.log_likelihood,
        "aic": fit.aic,
        "bic": fit.bic,
        "n_obs": fit.n_obs,
        "n_clusters": fit.n_clusters,
        "convergence": {"converged": fit.converged, "iterations": fit.iterations},
        "ll_comparable_counts": fit.ll_comparable_counts,
        "excluded_zero_rows": fit.excluded_zero_rows,
        "floored_rows": fit.floored_rows,
        "metrics": metrics or {},
    }


def model_from_dict(raw: dict) -> FittedModel:
    spec = ModelSpec.from_dict(raw["spec"]) if raw.get("spec") else None
    return FittedModel(
        family=raw["family"],
        columns=list(raw["columns"]),
        coefficients={k: float(v) for k, v in raw["coefficients"].items()},
        covariance=np.asarray(raw["covariance"], dtype=float),
        cov_params=list(raw["cov_params"]),
        cov_type=raw.get("cov_type", "observed_information"),
        log_likelihood=float(raw["log_likelihood"]),
        aic=float(raw["aic"]),
        bic=float(raw["bic"]),
        n_obs=int(raw["n_obs"]),
        n_clusters=int(raw["n_clusters"]),
        converged=bool(raw["convergence"]["converged"]),
        iterations=int(raw["convergence"]["iterations"]),
        spec=spec,
        label=raw.get("label", ""),
        dispersion_alpha=raw.get("dispersion_alpha"),
        alpha_boundary=bool(raw.get("alpha_boundary", False)),
        ll_comparable_counts=bool(raw.get("ll_comparable_counts", True)),
        excluded_zero_rows=int(raw.get("excluded_zero_rows", 0)),
        floored_rows=int(raw.get("floored_rows", 0)),
    )


def comparison_to_dict(comparison: ModelComparison) -> dict:
    return {
        "rows": [
            {
                "label": row.label,
                "log_likelihood": row.log_likelihood,
                "aic": row.aic,
                "bic": row.bic,
                "k_params": row.k_params,
                "lrt_stat": row.lrt_stat,
                "p_value": row.p_value,
                "dispersion_alpha": row.dispersion_alpha,
            }
            for row in comparison.rows
        ]
    }


def bootstrap_to_dict(report: BootstrapReport) -> dict:
    def triplet(t):
        return {"lower_2.5": t[0], "median": t[1], "upper_97.5": t[2]}

    return {
        "B": report.B,
        "seed": report.seed,
        "failed_replicates": report.failed_replicates,
        "coefficients": {name: triplet(t) for name, t in report.coefficients.items()},
        "dispersion_alpha": triplet(report.dispersion) if report.dispersion else None,
        "metrics": {name: triplet(t) for name, t in report.metrics.items()},
    }


def cost_floor_sensitivity(
    snapshot: SystemSnapshot, spec: ModelSpec, fit: FittedModel, factor: float = 10.0
) -> dict | None:
    """When any row was floored, refit at floor*factor and report coefficient drift."""
    design = build_design(snapshot, spec)
    if design.floored_rows == 0:
        return None
    alt_spec = dataclasses.replace(spec, cost_floor=spec.cost_floor * factor)
    alt_fit = fit_negbin(build_design(snapshot, alt_spec))
    drift = {
        name: abs(alt_fit.coefficients[name] - fit.coefficients[name]) for name in fit.coefficients
    }
    return {
        "floored_rows": design.floored_rows,
        "cost_floor": spec.cost_floor,
        "alternative_floor": alt_spec.cost_floor,
        "max_abs_coefficient_change": max(drift.values()),
        "coefficient_change": drift,
    }


# ---------------------------------------------------------------------------
# Scenario execution
# ---------------------------------------------------------------------------

def scaled_slots(snapshot: SystemSnapshot, scenario: ScenarioSpec) -> dict[str, float]:
    return {
        s.school_id: float(s.slots or 0) * scenario.scale_for_region(s.region)
        for s in snapshot.esc_destinations()
    }


def run_scenario(
    snapshot: SystemSnapshot,
    fit: FittedModel,
    scenario: ScenarioSpec,
    policy: AugmentationPolicy | None = None,
    threads: int | None = None,
    phi_cost_reduction: float = 0.0,
    on_seed=None,
) -> dict:
    """Full scenario run: augmented pairs -> capped predictions -> allocation
    -> decongestion report. Returns one JSON-ready dict."""
    policy = policy or AugmentationPolicy()
    scenario.check()
    pairs = augment_pairs(snapshot, policy)
    pools = candidate_pools(snapshot)
    baseline_yhat = unconstrained_predictions(fit, snapshot, pairs, phi_cost_reduction)
    phi = congested_fractions(baseline_yhat, pairs, snapshot)
    predicted = scenario_predictions(fit, snapshot, pairs, pools, scenario)
    slots = scaled_slots(snapshot, scenario)
    observed_b = {k: float(v) for k, v in snapshot.observed_flow_by_dest().items()}

    uncapped = unconstrained_predictions(fit, snapshot, pairs, scenario.cost_reduction)
    if len(predicted) <= EXHAUSTIVE_PAIR_LIMIT:
        result = run_exhaustive(predicted, pools, slots)
    else:
        result = run_monte_carlo(
            predicted, pools, slots, list(scenario.seeds), threads=resolve_threads(threads), on_seed=on_seed
        )

    totals = decongestion_totals(result, phi, observed_b, slots)
    runs = totals.pop("_runs")
    del runs  # per-run matrices are not serialized
    decomposition = decompose_paths(result, phi, observed_b)

    n_existing = sum(1 for p in pairs if p.pair_class == PAIR_EXISTING)
    return {
        "scenario": scenario.to_dict(),
        "augmentation": policy.to_dict(),
        "prng": PRNG_ID,
        "mode": result.mode,
        "R": result.n_runs,
        "pair_counts": {
            "existing": n_existing,
            "hypothetical": len(pairs) - n_existing,
            "total": len(pairs),
        },
        "pools_total": float(math.fsum(pools.values())),
        "slots_total": float(math.fsum(slots.values())),
        "observed_total": float(math.fsum(observed_b.values())),
        "predicted": {
            "uncapped_total": float(np.sum(uncapped)),
            "capped_total": float(math.fsum(p.yhat for p in predicted)),
        },
        "allocation": {
            "system": totals["system"],
            "per_destination": totals["per_destination"],
            "classification_counts": totals["classification_counts"],
        },
        "decomposition": decomposition,
    }


def summarize_suite(observed_total: float, scenario_reports: list[dict]) -> dict:
    """Table-style suite summary: predicted means with percentage deltas against
    the observed baseline and against the smallest cost-reduction scenario.

    Pure formatting over the per-scenario artifacts; no new arithmetic.
    """
    ordered = sorted(scenario_reports, key=lambda r: r["scenario"]["cost_reduction"])
    reference = ordered[0] if ordered else None
    rows = [
        {
            "label": "observed",
            "cost_reduction": None,
            "predicted_mean": observed_total,
            "delta_from_observed": None,
            "delta_from_reference": None,
            "sd": None,
        }
    ]
    for report in ordered:
        mean = report["allocation"]["system"]["Y"]["mean"]
        ref_mean = reference["allocation"]["system"]["Y"]["mean"] if reference else None
        rows.append(
            {
                "label": report["scenario"]["label"],
                "cost_reduction": report["scenario"]["cost_reduction"],
                "predicted_mean": mean,
                "delta_from_observed": format_percent_change(mean, observed_total),
                "delta_from_reference": (
                    None if report is reference else format_percent_change(mean, ref_mean)
                ),
                "sd": report["allocation"]["system"]["Y"]["sd"],
            }
        )
    return {
        "observed_total": observed_total,
        "reference_label": reference["scenario"]["label"] if reference else None,
        "rows": rows,
    }


def run_scenario_suite(
    snapshot: SystemSnapshot,
    fit: FittedModel,
    scenarios: list[ScenarioSpec],
    out_dir: str | Path,
    policy: AugmentationPolicy | None = None,
    threads: int | None = None,
    manifest_extra: dict | None = None,
    per_seed: bool = False,
) -> dict:
    """Run every scenario, write allocation_{label}.json files plus summary.json.

    On failure, partially written outputs are removed before re-raising.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    policy = policy or AugmentationPolicy()
    observed_total = float(sum(snapshot.observed_flow_by_dest().values()))
    try:
        reports = []
        for scenario in scenarios:
            on_seed = None
            if per_seed:
                seed_dir = out / "per_seed" / scenario.label
                seed_dir.mkdir(parents=True, exist_ok=True)

                def on_seed(seed, pairs, accepted, _dir=seed_dir):
                    path = _dir / f"seed_{seed}.json"
                    write_json(
                        path,
                        {
                            "seed": seed,
                            "accepted": [
                                {"origin_id": p.origin_id, "dest_id": p.dest_id, "flow": a}
                                for p, a in zip(pairs, accepted)
                                if a > 0
                            ],
                        },
                    )
                    written.append(path)

            report = run_scenario(snapshot, fit, scenario, policy, threads=threads, on_seed=on_seed)
            report["manifest"] = dict(manifest_extra or {})
            path = out / f"allocation_{scenario.label}.json"
            write_json(path, report)
            written.append(path)
            reports.append(report)
        summary = summarize_suite(observed_total, reports)
        summary["manifest"] = dict(manifest_extra or {})
        summary_path = out / "summary.json"
        write_json(summary_path, summary)
        written.append(summary_path)
        return summary
    except Exception:
        for path in written:
            try:
                path.unlink()
            except OSError:
                pass
        raise


def system_summary(snapshot: SystemSnapshot) -> dict:
    """Counts, capacity totals and the demand/supply ratio for one snapshot."""
    pools = candidate_pools(snapshot)
    total_pool = float(math.fsum(pools.values()))
    total_slots = float(sum(s.slots or 0 for s in snapshot.esc_destinations()))
    congested = snapshot.congested_set
    feeders = snapshot.congested_feeding_origins()
    return {
        "schools": {
            "origins": len(snapshot.origins()),
            "esc_destinations": len(snapshot.esc_destinations()),
            "public_destinations": len(snapshot.public_destinations()),
        },
        "regions": snapshot.regions(),
        "od_pairs": len(snapshot.od),
        "observed_total": float(sum(snapshot.observed_flow_by_dest().values())),
        "candidate_pool_total": total_pool,
        "slot_total": total_slots,
        "demand_supply_ratio": (total_pool / total_slots) if total_slots > 0 else None,
        "demand_supply_display": format_ratio(total_pool, total_slots),
        "congested_public_schools": len(congested),
        "congested_feeding_origins": len(feeders),
        "subsidy_baseline": snapshot.subsidy_baseline,
    }
