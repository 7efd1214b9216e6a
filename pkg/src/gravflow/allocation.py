"""Doubly constrained stochastic allocation and decongestion accounting.

Pairs are processed sequentially in a seeded random order; each pair receives
min(residual pool, residual slots, predicted flow) and both residuals deplete
immediately, so routes compete for shared capacity. Averaging over seeds
gives Monte Carlo statistics; systems with at most 8 pairs can instead be
enumerated exactly over all processing orders. Flows stay fractional
throughout; integerization is offered only as a report-time formatter.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .data import PAIR_EXISTING, SystemSnapshot
from .predictor import PredictedPairFlow
from .rng import PRNG_ID, permutation

EXHAUSTIVE_PAIR_LIMIT = 8

_DEPLETED = 1e-12


@dataclass
class AllocationState:
    residual_pools: dict[str, float]
    residual_slots: dict[str, float]
    accepted: dict[tuple[str, str], float]

    def total_allocated(self) -> float:
        return sum(self.accepted.values())


def _canonical_pairs(predicted: list[PredictedPairFlow]) -> list[PredictedPairFlow]:
    # permutation indices refer to this canonical order, so input order is irrelevant
    return sorted(predicted, key=lambda p: (p.origin_id, p.dest_id))


def _allocate_sequence(
    order,
    pair_origin: list[int],
    pair_dest: list[int],
    yhat: list[float],
    pools: list[float],
    slots: list[float],
) -> list[float]:
    """Core acceptance loop; mutates the residual lists, returns per-pair flows."""
    accepted = [0.0] * len(yhat)
    total_e = math.fsum(pools)
    total_k = math.fsum(slots)
    for idx in order:
        if total_e <= _DEPLETED or total_k <= _DEPLETED:
            break
        oi = pair_origin[idx]
        dj = pair_dest[idx]
        e = pools[oi]
        k = slots[dj]
        a = e if e < k else k
        y = yhat[idx]
        if y < a:
            a = y
        if a > 0.0:
            accepted[idx] = a
            pools[oi] = e - a
            slots[dj] = k - a
            total_e -= a
            total_k -= a
    return accepted


def allocate_once(
    predicted: list[PredictedPairFlow],
    pools: dict[str, float],
    slots: dict[str, float],
    permutation_seed: int,
) -> AllocationState:
    """One full allocation pass in the processing order drawn from the seed.

    The permutation is generated by the pinned RNG (see rng.PRNG_ID) over the
    canonically sorted pair list, so results depend only on inputs and seed.
    """
    pairs = _canonical_pairs(predicted)
    origin_ids = sorted(pools)
    dest_ids = sorted(slots)
    o_index = {oid: i for i, oid in enumerate(origin_ids)}
    d_index = {did: j for j, did in enumerate(dest_ids)}
    pair_origin = [o_index[p.origin_id] for p in pairs]
    pair_dest = [d_index[p.dest_id] for p in pairs]
    yhat = [float(p.yhat) for p in pairs]
    e = [float(pools[o]) for o in origin_ids]
    k = [float(slots[d]) for d in dest_ids]
    order = permutation(len(pairs), permutation_seed)
    accepted = _allocate_sequence(order, pair_origin, pair_dest, yhat, e, k)
    return AllocationState(
        residual_pools=dict(zip(origin_ids, e)),
        residual_slots=dict(zip(dest_ids, k)),
        accepted={(p.origin_id, p.dest_id): a for p, a in zip(pairs, accepted)},
    )


@dataclass
class MonteCarloResult:
    """Per-destination enrollment draws across allocation runs.

    Y has one row per run (seed or enumerated permutation) and one column per
    destination; existing/hypothetical components satisfy Y = Ye + Yh exactly
    per run.
    """

    dest_ids: list[str]
    origin_ids: list[str]
    Y: np.ndarray
    Y_existing: np.ndarray
    Y_hypothetical: np.ndarray
    allocated_by_origin: np.ndarray
    seeds: list[int] | None        # None in exhaustive mode
    mode: str = "seeds"
    prng: str = PRNG_ID

    @property
    def n_runs(self) -> int:
        return self.Y.shape[0]

    def system_totals(self) -> np.ndarray:
        return self.Y.sum(axis=1)


def _stats_over_runs(values: np.ndarray) -> dict[str, float]:
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    lo, hi = np.percentile(values, [2.5, 97.5])
    return {"mean": mean, "sd": sd, "p2.5": float(lo), "p97.5": float(hi)}


def summarize_runs(result: MonteCarloResult) -> dict:
    """Mean/SD/percentile summary per destination and for the system total."""
    per_dest = {
        dest: _stats_over_runs(result.Y[:, j]) for j, dest in enumerate(result.dest_ids)
    }
    return {
        "R": result.n_runs,
        "mode": result.mode,
        "per_destination": per_dest,
        "system": _stats_over_runs(result.system_totals()),
    }


def _prepare_arrays(
    predicted: list[PredictedPairFlow],
    pools: dict[str, float],
    slots: dict[str, float],
):
    pairs = _canonical_pairs(predicted)
    origin_ids = sorted(pools)
    dest_ids = sorted(slots)
    o_index = {oid: i for i, oid in enumerate(origin_ids)}
    d_index = {did: j for j, did in enumerate(dest_ids)}
    pair_origin = [o_index[p.origin_id] for p in pairs]
    pair_dest = [d_index[p.dest_id] for p in pairs]
    yhat = [float(p.yhat) for p in pairs]
    is_existing = [p.pair_class == PAIR_EXISTING for p in pairs]
    e0 = [float(pools[o]) for o in origin_ids]
    k0 = [float(slots[d]) for d in dest_ids]
    return pairs, origin_ids, dest_ids, pair_origin, pair_dest, yhat, is_existing, e0, k0


def _accumulate(
    accepted: list[float],
    pair_origin: list[int],
    pair_dest: list[int],
    is_existing: list[bool],
    n_origins: int,
    n_dests: int,
):
    # the class components are the primaries; Y := Ye + Yh holds exactly
    ye = np.zeros(n_dests)
    yh = np.zeros(n_dests)
    by_origin = np.zeros(n_origins)
    for a, oi, dj, ex in zip(accepted, pair_origin, pair_dest, is_existing):
        if a > 0.0:
            by_origin[oi] += a
            if ex:
                ye[dj] += a
            else:
                yh[dj] += a
    return ye, yh, by_origin


def run_monte_carlo(
    predicted: list[PredictedPairFlow],
    pools: dict[str, float],
    slots: dict[str, float],
    seeds: list[int],
    threads: int = 1,
    on_seed=None,
) -> MonteCarloResult:
    """One allocation per seed; per-destination draws are kept, per-pair detail
    is streamed to on_seed(seed, pairs, accepted) and then discarded.

    Results are aggregated in seed order, so they are identical for any
    thread count.
    """
    if not seeds:
        raise ValueError("seeds must be non-empty")
    pairs, origin_ids, dest_ids, pair_origin, pair_dest, yhat, is_existing, e0, k0 = _prepare_arrays(
        predicted, pools, slots
    )
    n_pairs = len(pairs)

    def run_one(seed: int) -> list[float]:
        order = permutation(n_pairs, seed)
        return _allocate_sequence(order, pair_origin, pair_dest, yhat, list(e0), list(k0))

    if threads > 1 and len(seeds) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(run_one, seeds))
    else:
        runs = [run_one(seed) for seed in seeds]

    R = len(seeds)
    Ye = np.zeros((R, len(dest_ids)))
    by_origin = np.zeros((R, len(origin_ids)))
    Yh = np.zeros((R, len(dest_ids)))
    for r, (seed, accepted) in enumerate(zip(seeds, runs)):
        ye, yh, bo = _accumulate(accepted, pair_origin, pair_dest, is_existing, len(origin_ids), len(dest_ids))
        Ye[r] = ye
        Yh[r] = yh
        by_origin[r] = bo
        if on_seed is not None:
            on_seed(seed, pairs, accepted)
    return MonteCarloResult(
        dest_ids=dest_ids,
        origin_ids=origin_ids,
        Y=Ye + Yh,
        Y_existing=Ye,
        Y_hypothetical=Yh,
        allocated_by_origin=by_origin,
        seeds=list(seeds),
        mode="seeds",
    )


def run_exhaustive(
    predicted: list[PredictedPairFlow],
    pools: dict[str, float],
    slots: dict[str, float],
) -> MonteCarloResult:
    """Exact allocation distribution over every processing order (<= 8 pairs)."""
    pairs, origin_ids, dest_ids, pair_origin, pair_dest, yhat, is_existing, e0, k0 = _prepare_arrays(
        predicted, pools, slots
    )
    n_pairs = len(pairs)
    if n_pairs > EXHAUSTIVE_PAIR_LIMIT:
        raise ValueError(f"exhaustive mode supports at most {EXHAUSTIVE_PAIR_LIMIT} pairs, got {n_pairs}")
    rows_ye = []
    rows_yh = []
    rows_origin = []
    for order in itertools.permutations(range(n_pairs)):
        accepted = _allocate_sequence(order, pair_origin, pair_dest, yhat, list(e0), list(k0))
        ye, yh, bo = _accumulate(accepted, pair_origin, pair_dest, is_existing, len(origin_ids), len(dest_ids))
        rows_ye.append(ye)
        rows_yh.append(yh)
        rows_origin.append(bo)
    Ye = np.vstack(rows_ye) if rows_ye else np.zeros((1, len(dest_ids)))
    Yh = np.vstack(rows_yh) if rows_yh else np.zeros((1, len(dest_ids)))
    by_origin = np.vstack(rows_origin) if rows_origin else np.zeros((1, len(origin_ids)))
    return MonteCarloResult(
        dest_ids=dest_ids,
        origin_ids=origin_ids,
        Y=Ye + Yh,
        Y_existing=Ye,
        Y_hypothetical=Yh,
        allocated_by_origin=by_origin,
        seeds=None,
        mode="exhaustive",
    )


# ---------------------------------------------------------------------------
# Decongestion attribution
# ---------------------------------------------------------------------------

def congested_fractions(
    baseline_yhat: np.ndarray,
    pairs,
    snapshot: SystemSnapshot,
) -> dict[str, float]:
    """Share of each destination's unconstrained baseline demand that comes
    from origins feeding congested public schools; 0 when it has no demand."""
    feeders = snapshot.congested_feeding_origins()
    num: dict[str, float] = {}
    den: dict[str, float] = {}
    for rec, y in zip(pairs, baseline_yhat):
        den[rec.dest_id] = den.get(rec.dest_id, 0.0) + float(y)
        if rec.origin_id in feeders:
            num[rec.dest_id] = num.get(rec.dest_id, 0.0) + float(y)
    phi: dict[str, float] = {}
    for dest, total in den.items():
        phi[dest] = (num.get(dest, 0.0) / total) if total > 0 else 0.0
    return phi


CLASS_POSITIVE_MARGINAL = "positive_marginal"
CLASS_OVER_ENROLLED = "over_enrolled"
CLASS_UNDER_PREDICTED = "under_predicted"


def classify_destination(mean_y: float, observed_b: float, scaled_slots: float) -> str:
    if mean_y > observed_b:
        return CLASS_POSITIVE_MARGINAL
    if observed_b > scaled_slots:
        return CLASS_OVER_ENROLLED
    return CLASS_UNDER_PREDICTED


def decongestion_totals(
    result: MonteCarloResult,
    phi: dict[str, float],
    observed_b: dict[str, float],
    scaled_slots: dict[str, float],
) -> dict:
    """Per-destination decongestion statistics, computed per run then summarized.

    Total role: Y * phi. Marginal potential: max(0, Y - b) * phi, the
    congestion-weighted headroom beyond current enrollment.
    """
    per_dest: dict[str, dict] = {}
    D_total_runs = np.zeros_like(result.Y)
    D_marg_runs = np.zeros_like(result.Y)
    counts = {CLASS_POSITIVE_MARGINAL: 0, CLASS_OVER_ENROLLED: 0, CLASS_UNDER_PREDICTED: 0}
    for j, dest in enumerate(result.dest_ids):
        p = phi.get(dest, 0.0)
        b = float(observed_b.get(dest, 0.0))
        y_runs = result.Y[:, j]
        d_total = y_runs * p
        d_marg = np.maximum(0.0, y_runs - b) * p
        D_total_runs[:, j] = d_total
        D_marg_runs[:, j] = d_marg
        label = classify_destination(float(np.mean(y_runs)), b, float(scaled_slots.get(dest, 0.0)))
        counts[label] += 1
        per_dest[dest] = {
            "phi": p,
            "observed_b": b,
            "slots": float(scaled_slots.get(dest, 0.0)),
            "Y": _stats_over_runs(y_runs),
            "D_total": _stats_over_runs(d_total),
            "D_marg": _stats_over_runs(d_marg),
            "classification": label,
        }
    return {
        "per_destination": per_dest,
        "classification_counts": counts,
        "system": {
            "Y": _stats_over_runs(result.system_totals()),
            "D_total": _stats_over_runs(D_total_runs.sum(axis=1)),
            "D_marg": _stats_over_runs(D_marg_runs.sum(axis=1)),
        },
        "_runs": {"D_total": D_total_runs, "D_marg": D_marg_runs},
    }


def decompose_paths(
    result: MonteCarloResult,
    phi: dict[str, float],
    observed_b: dict[str, float],
) -> dict:
    """Existing/hypothetical split of enrollment and both decongestion measures.

    Y splits exactly per run by construction; D_total and D_marg inherit the
    split through each run's enrollment shares, so components always sum to
    their totals.
    """
    phi_vec = np.array([phi.get(d, 0.0) for d in result.dest_ids])
    b_vec = np.array([float(observed_b.get(d, 0.0)) for d in result.dest_ids])
    with np.errstate(invalid="ignore", divide="ignore"):
        share_exist = np.where(result.Y > 0, result.Y_existing / np.where(result.Y > 0, result.Y, 1.0), 0.0)
    D_total = result.Y * phi_vec
    D_marg = np.maximum(0.0, result.Y - b_vec) * phi_vec
    D_total_exist = D_total * share_exist
    D_marg_exist = D_marg * share_exist

    def split_stats(total: np.ndarray, existing_part: np.ndarray) -> dict:
        total_runs = total.sum(axis=1)
        exist_runs = existing_part.sum(axis=1)
        hyp_runs = total_runs - exist_runs
        mean_total = float(np.mean(total_runs))
        return {
            "existing": _stats_over_runs(exist_runs),
            "hypothetical": _stats_over_runs(hyp_runs),
            "existing_share": float(np.mean(exist_runs) / mean_total) if mean_total > 0 else 0.0,
            "hypothetical_share": float(np.mean(hyp_runs) / mean_total) if mean_total > 0 else 0.0,
        }

    per_dest = {}
    for j, dest in enumerate(result.dest_ids):
        mean_ye = float(np.mean(result.Y_existing[:, j]))
        mean_yh = float(np.mean(result.Y_hypothetical[:, j]))
        mean_y = mean_ye + mean_yh
        per_dest[dest] = {
            "Y_existing_mean": mean_ye,
            "Y_hypothetical_mean": mean_yh,
            "existing_share": mean_ye / mean_y if mean_y > 0 else 0.0,
            "hypothetical_share": mean_yh / mean_y if mean_y > 0 else 0.0,
            "D_total_existing_mean": float(np.mean(D_total_exist[:, j])),
            "D_total_hypothetical_mean": float(np.mean(D_total[:, j] - D_total_exist[:, j])),
            "D_marg_existing_mean": float(np.mean(D_marg_exist[:, j])),
            "D_marg_hypothetical_mean": float(np.mean(D_marg[:, j] - D_marg_exist[:, j])),
        }
    return {
        "per_destination": per_dest,
        "system": {
            "Y": split_stats(result.Y, result.Y_existing),
            "D_total": split_stats(D_total, D_total_exist),
            "D_marg": split_stats(D_marg, D_marg_exist),
        },
    }


def integerize_flows(values: list[float]) -> list[int]:
    """Report-time rounding: floor everything, then hand out the remaining
    units to the largest remainders (ties to the earlier index)."""
    floors = [math.floor(v) for v in values]
    remainder = int(round(math.fsum(values))) - sum(floors)
    if remainder <= 0:
        return floors
    order = sorted(range(len(values)), key=lambda i: (-(values[i] - floors[i]), i))
    for i in order[:remainder]:
        floors[i] += 1
    return floors
