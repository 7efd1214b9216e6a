"""Independent reference implementations used only to check the real ones.

Everything here is deliberately written from the math, not from the package
internals: direct likelihood formulas, numeric derivatives, dictionary-based
allocation stepping, and raw-CSV recounts.
"""

from __future__ import annotations

import csv
import itertools
import math
from pathlib import Path

import numpy as np
from scipy.special import gammaln


def negbin_loglik_ref(X: np.ndarray, y: np.ndarray, beta: np.ndarray, alpha: float) -> float:
    eta = X @ beta
    mu = np.exp(eta)
    if alpha < 1e-10:
        return float(np.sum(y * eta - mu - gammaln(y + 1.0)))
    inv = 1.0 / alpha
    return float(
        np.sum(
            gammaln(y + inv)
            - gammaln(inv)
            - gammaln(y + 1.0)
            + inv * np.log(inv / (inv + mu))
            + y * np.log(mu / (inv + mu))
        )
    )


def _coordinate_newton_step(f, x: float, h: float, lower: float | None = None) -> float:
    """One safeguarded 1-D Newton step using central finite differences."""
    f0 = f(x)
    fp = f(x + h)
    fm = f(x - h) if (lower is None or x - h > lower) else f(x)
    grad = (fp - fm) / (2.0 * h) if (lower is None or x - h > lower) else (fp - f0) / h
    curv = (fp - 2.0 * f0 + fm) / (h * h) if (lower is None or x - h > lower) else -1.0
    if curv < 0:
        step = -grad / curv
    else:
        step = math.copysign(0.1, grad) if grad != 0 else 0.0
    # backtrack until the objective does not decrease
    for _ in range(50):
        x_new = x + step
        if lower is not None and x_new <= lower:
            x_new = (x + lower) / 2.0 if x > lower else x
        if f(x_new) >= f0 - 1e-13:
            return x_new
        step *= 0.5
    return x


def brute_force_negbin(
    X: np.ndarray,
    y: np.ndarray,
    sweeps: int = 400,
    tol: float = 1e-11,
    seed: int = 0,
) -> tuple[np.ndarray, float, float]:
    """Coordinate-wise Newton maximization of the NB2 likelihood from several starts.

    Returns (beta, alpha, loglik). Slow by design; only for small problems.
    """
    rng = np.random.default_rng(seed)
    n, k = X.shape
    ls, *_ = np.linalg.lstsq(X, np.log(y + 1.0), rcond=None)
    b0 = np.zeros(k)
    b0[0] = math.log(max(float(np.mean(y)), 0.1))
    starts = [(b0, 0.3), (ls, 0.8), (ls + rng.normal(0.0, 0.1, size=k), 0.1)]

    best_params = None
    best_ll = -math.inf
    for beta_init, alpha_init in starts:
        params = np.concatenate([beta_init, [alpha_init]])

        def ll_at(params_vec):
            return negbin_loglik_ref(X, y, params_vec[:k], max(params_vec[k], 1e-9))

        for _ in range(sweeps):
            moved = 0.0
            for j in range(k + 1):
                x_old = params[j]

                def f(v, j=j):
                    trial = params.copy()
                    trial[j] = v
                    return ll_at(trial)

                h = max(1e-5, 1e-5 * abs(x_old))
                lower = 1e-9 if j == k else None
                params[j] = _coordinate_newton_step(f, x_old, h, lower=lower)
                moved = max(moved, abs(params[j] - x_old))
            if moved < tol:
                break
        ll = ll_at(params)
        if ll > best_ll:
            best_ll = ll
            best_params = params.copy()

    # the boundary (Poisson) candidate may beat every interior start
    poisson_beta = _brute_force_poisson(X, y)
    poisson_ll = negbin_loglik_ref(X, y, poisson_beta, 0.0)
    if poisson_ll > best_ll:
        return poisson_beta, 0.0, poisson_ll
    return best_params[:k], float(best_params[k]), best_ll


def _brute_force_poisson(X: np.ndarray, y: np.ndarray, sweeps: int = 400, tol: float = 1e-11) -> np.ndarray:
    n, k = X.shape
    params, *_ = np.linalg.lstsq(X, np.log(y + 1.0), rcond=None)
    for _ in range(sweeps):
        moved = 0.0
        for j in range(k):
            x_old = params[j]

            def f(v, j=j):
                trial = params.copy()
                trial[j] = v
                return negbin_loglik_ref(X, y, trial, 0.0)

            params[j] = _coordinate_newton_step(f, x_old, max(1e-5, 1e-5 * abs(x_old)))
            moved = max(moved, abs(params[j] - x_old))
        if moved < tol:
            break
    return params


def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x, dtype=float)
    for j in range(len(x)):
        step = h * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += step
        xm[j] -= step
        grad[j] = (f(xp) - f(xm)) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# Allocation references
# ---------------------------------------------------------------------------

def naive_allocation(
    pairs: list[tuple[str, str, float]],
    pools: dict[str, float],
    slots: dict[str, float],
    order: list[int],
) -> dict[tuple[str, str], float]:
    """Hand-stepped sequential min(e, k, yhat) acceptance, no shortcuts."""
    e = dict(pools)
    k = dict(slots)
    accepted: dict[tuple[str, str], float] = {}
    for idx in order:
        origin, dest, yhat = pairs[idx]
        a = min(e[origin], k[dest], yhat)
        accepted[(origin, dest)] = accepted.get((origin, dest), 0.0) + a
        e[origin] -= a
        k[dest] -= a
    return accepted


def enumerate_allocation_mean(
    pairs: list[tuple[str, str, float]],
    pools: dict[str, float],
    slots: dict[str, float],
) -> dict[tuple[str, str], float]:
    """Exact mean accepted flow per pair over every processing order."""
    n = len(pairs)
    totals: dict[tuple[str, str], float] = {(o, d): 0.0 for o, d, _ in pairs}
    count = 0
    for order in itertools.permutations(range(n)):
        acc = naive_allocation(pairs, pools, slots, list(order))
        for key, value in acc.items():
            totals[key] += value
        count += 1
    return {key: value / count for key, value in totals.items()}


# ---------------------------------------------------------------------------
# Raw-file recounts
# ---------------------------------------------------------------------------

def recount_pools_from_files(snapshot_dir: str | Path) -> dict[str, float]:
    """E_i per origin recomputed straight from the CSVs."""
    snapshot_dir = Path(snapshot_dir)
    enrollment: dict[str, int] = {}
    with open(snapshot_dir / "schools.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["sector"] == "public_origin":
                enrollment[row["school_id"]] = int(float(row["enrollment_g6"]))
    outflow: dict[str, int] = {}
    with open(snapshot_dir / "od_pairs.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            outflow[row["origin_id"]] = outflow.get(row["origin_id"], 0) + int(float(row["observed_flow"]))
    return {
        origin: float(max(0, total - outflow.get(origin, 0)))
        for origin, total in enrollment.items()
    }


def recount_classifications(per_destination: dict[str, dict]) -> dict[str, int]:
    """Re-derive the destination classification counts from report entries."""
    counts = {"positive_marginal": 0, "over_enrolled": 0, "under_predicted": 0}
    for entry in per_destination.values():
        mean_y = entry["Y"]["mean"]
        b = entry["observed_b"]
        slots = entry["slots"]
        if mean_y > b:
            counts["positive_marginal"] += 1
        elif b > slots:
            counts["over_enrolled"] += 1
        else:
            counts["under_predicted"] += 1
    return counts
