"""Scenario-level flow prediction: candidate pools, pair augmentation, capped predictions.

The fitted elasticities are structural; a scenario only changes each pair's
net cost (and, downstream, slot capacity). Predictions here are continuous:
integer rounding is a report-formatting concern, never part of the math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import (
    PAIR_HYPOTHETICAL,
    SECTOR_ESC,
    ODRecord,
    School,
    SystemSnapshot,
)
from .estimator import FittedModel


@dataclass(frozen=True)
class AugmentationPolicy:
    """How counterfactual pathways are added to the observed pair set.

    Candidates are ranked per origin by the fixed lexicographic key
    (distance asc, net cost asc, rating desc, dest id asc); the first
    max_new_per_origin candidates become hypothetical pairs.
    """

    max_new_per_origin: int = 10
    distance_cutoff_km: float = 30.0
    restrict_to_congested_feeders: bool = False

    def check(self) -> None:
        if self.max_new_per_origin < 0:
            raise ValueError("max_new_per_origin must be >= 0")
        if self.distance_cutoff_km <= 0:
            raise ValueError("distance_cutoff_km must be positive")

    def to_dict(self) -> dict:
        return {
            "max_new_per_origin": self.max_new_per_origin,
            "distance_cutoff_km": self.distance_cutoff_km,
            "sort_key": "distance_km asc, net_cost asc, rating desc, dest_id asc",
            "restrict_to_congested_feeders": self.restrict_to_congested_feeders,
        }


@dataclass(frozen=True)
class ScenarioSpec:
    label: str
    cost_reduction: float = 0.0            # thousands of pesos per student
    slot_scale: float | dict[str, float] = 1.0  # global, or per-region map
    seeds: tuple[int, ...] = tuple(range(100))

    def check(self) -> None:
        if self.cost_reduction < 0:
            raise ValueError("cost_reduction must be >= 0")
        scales = self.slot_scale.values() if isinstance(self.slot_scale, dict) else [self.slot_scale]
        if any(s < 0 for s in scales):
            raise ValueError("slot_scale must be >= 0")
        if len(self.seeds) == 0:
            raise ValueError("seeds must be non-empty")

    def scale_for_region(self, region: str) -> float:
        if isinstance(self.slot_scale, dict):
            return float(self.slot_scale.get(region, 1.0))
        return float(self.slot_scale)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "cost_reduction": self.cost_reduction,
            "slot_scale": self.slot_scale,
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioSpec":
        seeds = raw.get("seeds")
        if seeds is None:
            seeds = tuple(range(int(raw.get("seed_count", 100))))
        slot_scale = raw.get("slot_scale", 1.0)
        if isinstance(slot_scale, dict):
            slot_scale = {str(k): float(v) for k, v in slot_scale.items()}
        spec = cls(
            label=str(raw.get("label", "scenario")),
            cost_reduction=float(raw.get("cost_reduction", 0.0)),
            slot_scale=slot_scale,
            seeds=tuple(int(s) for s in seeds),
        )
        spec.check()
        return spec


@dataclass(frozen=True)
class PredictedPairFlow:
    origin_id: str
    dest_id: str
    pair_class: str
    yhat: float


def candidate_pools(snapshot: SystemSnapshot) -> dict[str, float]:
    """Untapped candidates per origin: enrollment minus observed beneficiary outflow."""
    outflow = snapshot.esc_flow_by_origin()
    pools: dict[str, float] = {}
    for school in snapshot.origins():
        taken = outflow.get(school.school_id, 0)
        pools[school.school_id] = float(max(0, (school.enrollment_g6 or 0) - taken))
    return pools


def _candidate_sort_key(dest: School, distance: float, net_cost: float):
    return (distance, net_cost, -(dest.rating or 0), dest.school_id)


def augment_pairs(snapshot: SystemSnapshot, policy: AugmentationPolicy) -> list[ODRecord]:
    """Existing pairs plus the top-ranked counterfactual pathways per origin.

    A candidate is an (origin, ESC destination) pair inside the distance
    cutoff with a known distance (zero-flow OD rows double as distance
    entries) and no observed beneficiaries. Selected candidates enter as
    hypothetical pairs with zero observed flow and net cost equal to tuition
    minus the snapshot's baseline subsidy. Output order is deterministic.
    """
    policy.check()
    existing = [rec for rec in snapshot.od if rec.observed_flow > 0]
    existing_keys = {(rec.origin_id, rec.dest_id) for rec in existing}
    distance_of: dict[tuple[str, str], float] = {
        (rec.origin_id, rec.dest_id): rec.distance_km for rec in snapshot.od
    }

    by_id = snapshot.schools_by_id
    candidates_by_origin: dict[str, list[tuple[tuple, ODRecord]]] = {}
    feeders = snapshot.congested_feeding_origins() if policy.restrict_to_congested_feeders else None
    for (origin_id, dest_id), distance in distance_of.items():
        if (origin_id, dest_id) in existing_keys:
            continue
        if distance > policy.distance_cutoff_km:
            continue
        if feeders is not None and origin_id not in feeders:
            continue
        dest = by_id.get(dest_id)
        if dest is None or dest.sector != SECTOR_ESC:
            continue
        net_cost = float((dest.tuition or 0.0) - snapshot.subsidy_baseline)
        rec = ODRecord(
            origin_id=origin_id,
            dest_id=dest_id,
            observed_flow=0,
            distance_km=distance,
            net_cost=net_cost,
            pair_class=PAIR_HYPOTHETICAL,
        )
        candidates_by_origin.setdefault(origin_id, []).append(
            (_candidate_sort_key(dest, distance, net_cost), rec)
        )

    added: list[ODRecord] = []
    for origin_id in sorted(candidates_by_origin):
        ranked = sorted(candidates_by_origin[origin_id], key=lambda kv: kv[0])
        added.extend(rec for _, rec in ranked[: policy.max_new_per_origin])
    return existing + added


def prediction_rows(
    fit: FittedModel,
    snapshot: SystemSnapshot,
    pairs: list[ODRecord],
    cost_reduction: float = 0.0,
) -> np.ndarray:
    """Design rows for arbitrary pairs in the fitted model's column order.

    Net cost is floored exactly as at estimation time; the scenario reduction
    is applied before flooring: c' = max(c - delta, floor).
    """
    if fit.spec is None:
        raise ValueError("fitted model carries no spec; cannot build prediction rows")
    floor = fit.spec.cost_floor
    reference = fit.spec.reference_region
    by_id = snapshot.schools_by_id
    matrix = np.zeros((len(pairs), len(fit.columns)))
    col_index = {name: j for j, name in enumerate(fit.columns)}
    for i, rec in enumerate(pairs):
        origin = by_id[rec.origin_id]
        dest = by_id[rec.dest_id]
        row = matrix[i]
        row[col_index["intercept"]] = 1.0
        row[col_index["ln_distance"]] = math.log(rec.distance_km)
        row[col_index["ln_net_cost"]] = math.log(max(rec.net_cost - cost_reduction, floor))
        if "rating" in col_index:
            row[col_index["rating"]] = float(dest.rating or 0)
        if "ln_origin_income" in col_index:
            row[col_index["ln_origin_income"]] = math.log(origin.lgu_income)
        if "ln_dest_income" in col_index:
            row[col_index["ln_dest_income"]] = math.log(dest.lgu_income)
        o_col = f"origin_region_{origin.region}"
        if o_col in col_index:
            row[col_index[o_col]] = 1.0
        elif origin.region != reference and any(c.startswith("origin_region_") for c in fit.columns):
            raise ValueError(f"origin region '{origin.region}' unknown to the fitted model")
        d_col = f"dest_region_{dest.region}"
        if d_col in col_index:
            row[col_index[d_col]] = 1.0
        elif dest.region != reference and any(c.startswith("dest_region_") for c in fit.columns):
            raise ValueError(f"dest region '{dest.region}' unknown to the fitted model")
    return matrix


def unconstrained_predictions(
    fit: FittedModel,
    snapshot: SystemSnapshot,
    pairs: list[ODRecord],
    cost_reduction: float = 0.0,
) -> np.ndarray:
    """Expected flow per pair before any origin capping."""
    matrix = prediction_rows(fit, snapshot, pairs, cost_reduction)
    return np.exp(matrix @ fit.beta())


def scenario_predictions(
    fit: FittedModel,
    snapshot: SystemSnapshot,
    pairs: list[ODRecord],
    pools: dict[str, float],
    scenario: ScenarioSpec,
) -> list[PredictedPairFlow]:
    """Per-pair expected flows under a scenario, capped by each origin's pool.

    When an origin's raw predictions exceed its candidate pool E, all of that
    origin's flows are rescaled proportionally so they sum to E, preserving
    the relative attractiveness implied by the gravity model.
    """
    scenario.check()
    if not fit.converged:
        raise ValueError("refusing to predict from a non-converged model")
    yhat = unconstrained_predictions(fit, snapshot, pairs, scenario.cost_reduction)

    totals: dict[str, float] = {}
    for rec, value in zip(pairs, yhat):
        if rec.origin_id not in pools:
            raise KeyError(f"origin '{rec.origin_id}' missing from candidate pools")
        totals[rec.origin_id] = totals.get(rec.origin_id, 0.0) + float(value)
    scale = {
        origin: (pools[origin] / total if total > pools[origin] and total > 0 else 1.0)
        for origin, total in totals.items()
    }
    return [
        PredictedPairFlow(
            origin_id=rec.origin_id,
            dest_id=rec.dest_id,
            pair_class=rec.pair_class,
            yhat=float(value * scale[rec.origin_id]),
        )
        for rec, value in zip(pairs, yhat)
    ]
