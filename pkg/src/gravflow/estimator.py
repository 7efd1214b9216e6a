"""Gravity-model estimation on snapshot flows.

Counts are modeled with a log link: ln E(F) = X beta. The main family is
NB2 (variance mu + alpha*mu^2), fitted by alternating IRLS steps for the
coefficients with safeguarded Newton steps for the dispersion on its profile
likelihood, then polished with joint Newton iterations so the score is
numerically zero at the reported optimum. Poisson (alpha = 0) and log-OLS
baselines share the same design and report shape. Inference is clustered at
the origin school via a CR1 sandwich; uncertainty can also be bootstrapped
by resampling whole origin clusters.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .data import SystemSnapshot

ZERO_POLICY_POSITIVE = "positive_only"
ZERO_POLICY_INCLUDE = "include_zeros"

FAMILY_NEGBIN = "negbin"
FAMILY_POISSON = "poisson"
FAMILY_OLS_LOG = "ols_log"

_ALPHA_MIN = 1e-8


class DesignError(ValueError):
    """Design matrix cannot be built as requested."""


class FitError(RuntimeError):
    """Estimation failed structurally (rank deficiency, empty data)."""


@dataclass(frozen=True)
class ModelSpec:
    """Which predictors enter the design, and how rows are admitted."""

    include_rating: bool = True
    include_origin_region_fe: bool = True
    include_dest_region_fe: bool = True
    include_origin_income: bool = True
    include_dest_income: bool = True
    reference_region: str = "NCR"
    zero_flow_policy: str = ZERO_POLICY_POSITIVE
    cost_floor: float = 0.001  # thousands of pesos; keeps ln(net cost) defined

    def check(self) -> None:
        if self.cost_floor <= 0:
            raise ValueError("cost_floor must be positive")
        if self.zero_flow_policy not in (ZERO_POLICY_POSITIVE, ZERO_POLICY_INCLUDE):
            raise ValueError(f"unknown zero_flow_policy '{self.zero_flow_policy}'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


@dataclass
class DesignMatrix:
    response: np.ndarray          # non-negative integer counts
    matrix: np.ndarray            # n x k, column order as in `columns`
    columns: list[str]
    cluster_ids: list[str]        # origin school id per row
    row_keys: list[tuple[str, str]]
    spec: ModelSpec
    floored_rows: int = 0         # rows where net cost hit the floor
    dropped_zero_rows: int = 0    # rows removed by the positive-only policy

    @property
    def n_obs(self) -> int:
        return int(self.response.shape[0])

    @property
    def n_clusters(self) -> int:
        return len(set(self.cluster_ids))


def build_design(snapshot: SystemSnapshot, spec: ModelSpec) -> DesignMatrix:
    """Assemble the estimation design from snapshot OD records.

    Column order is deterministic: intercept, ln_distance, ln_net_cost, then
    rating / ln incomes when enabled, then origin-region and dest-region
    dummies (region labels sorted, reference level omitted).
    """
    spec.check()
    regions = snapshot.regions()
    if spec.reference_region not in regions:
        raise DesignError(f"reference region '{spec.reference_region}' not present in snapshot")
    dummy_regions = [r for r in regions if r != spec.reference_region]

    columns = ["intercept", "ln_distance", "ln_net_cost"]
    if spec.include_rating:
        columns.append("rating")
    if spec.include_origin_income:
        columns.append("ln_origin_income")
    if spec.include_dest_income:
        columns.append("ln_dest_income")
    if spec.include_origin_region_fe:
        columns.extend(f"origin_region_{r}" for r in dummy_regions)
    if spec.include_dest_region_fe:
        columns.extend(f"dest_region_{r}" for r in dummy_regions)

    by_id = snapshot.schools_by_id
    rows: list[list[float]] = []
    response: list[int] = []
    cluster_ids: list[str] = []
    row_keys: list[tuple[str, str]] = []
    floored = 0
    dropped_zero = 0
    for rec in snapshot.od:
        if spec.zero_flow_policy == ZERO_POLICY_POSITIVE and rec.observed_flow <= 0:
            dropped_zero += 1
            continue
        if not rec.distance_km > 0:
            raise DesignError(f"pair {(rec.origin_id, rec.dest_id)} has non-positive distance")
        origin = by_id[rec.origin_id]
        dest = by_id[rec.dest_id]
        if origin.region not in regions or dest.region not in regions:
            raise DesignError(f"pair {(rec.origin_id, rec.dest_id)} references a region outside the dummy map")
        cost = rec.net_cost
        if cost < spec.cost_floor:
            cost = spec.cost_floor
            floored += 1
        row = [1.0, math.log(rec.distance_km), math.log(cost)]
        if spec.include_rating:
            row.append(float(dest.rating or 0))
        if spec.include_origin_income:
            row.append(math.log(origin.lgu_income))
        if spec.include_dest_income:
            row.append(math.log(dest.lgu_income))
        if spec.include_origin_region_fe:
            row.extend(1.0 if origin.region == r else 0.0 for r in dummy_regions)
        if spec.include_dest_region_fe:
            row.extend(1.0 if dest.region == r else 0.0 for r in dummy_regions)
        rows.append(row)
        response.append(rec.observed_flow)
        cluster_ids.append(rec.origin_id)
        row_keys.append((rec.origin_id, rec.dest_id))

    if not rows:
        raise DesignError("all rows filtered out; nothing to estimate")
    matrix = np.asarray(rows, dtype=float)
    y = np.asarray(response, dtype=float)
    if not np.all(np.isfinite(matrix)):
        raise DesignError("design contains non-finite entries")
    return DesignMatrix(
        response=y,
        matrix=matrix,
        columns=columns,
        cluster_ids=cluster_ids,
        row_keys=row_keys,
        spec=spec,
        floored_rows=floored,
        dropped_zero_rows=dropped_zero,
    )


@dataclass
class FittedModel:
    family: str
    columns: list[str]
    coefficients: dict[str, float]
    covariance: np.ndarray                 # over cov_params order
    cov_params: list[str]
    cov_type: str
    log_likelihood: float
    aic: float
    bic: float
    n_obs: int
    n_clusters: int
    converged: bool
    iterations: int
    spec: ModelSpec | None = None
    label: str = ""
    dispersion_alpha: float | None = None  # negbin only
    alpha_boundary: bool = False
    ll_comparable_counts: bool = True      # False for the log-OLS baseline
    excluded_zero_rows: int = 0            # log-OLS only
    floored_rows: int = 0

    @property
    def k_params(self) -> int:
        extra = 1 if self.family == FAMILY_NEGBIN else 0
        if self.family == FAMILY_OLS_LOG:
            extra = 1  # residual variance
        return len(self.coefficients) + extra

    def beta(self) -> np.ndarray:
        return np.asarray([self.coefficients[c] for c in self.columns], dtype=float)

    def standard_errors(self) -> dict[str, float]:
        se = np.sqrt(np.maximum(np.diag(self.covariance), 0.0))
        return dict(zip(self.cov_params, se.tolist()))

    def z_values(self) -> dict[str, float]:
        out = {}
        se = self.standard_errors()
        values = dict(self.coefficients)
        if self.family == FAMILY_NEGBIN and "dispersion_alpha" in self.cov_params:
            values["dispersion_alpha"] = float(self.dispersion_alpha or 0.0)
        for name in self.cov_params:
            s = se[name]
            out[name] = values[name] / s if s > 0 else float("nan")
        return out

    def p_values(self) -> dict[str, float]:
        return {name: normal_p_value(z) for name, z in self.z_values().items()}


def normal_p_value(z: float) -> float:
    """Two-sided p-value from a standard normal."""
    if not math.isfinite(z):
        return float("nan")
    return float(special.erfc(abs(z) / math.sqrt(2.0)))


def aic_from_ll(log_likelihood: float, k: int) -> float:
    return 2.0 * k - 2.0 * log_likelihood


def bic_from_ll(log_likelihood: float, k: int, n_obs: int) -> float:
    return k * math.log(n_obs) - 2.0 * log_likelihood


# ---------------------------------------------------------------------------
# NB2 likelihood pieces (log link throughout)
# ---------------------------------------------------------------------------

def _mu_from_eta(eta: np.ndarray) -> np.ndarray:
    return np.exp(np.minimum(eta, 690.0))  # cap only guards intermediate iterates


def negbin_loglik(y: np.ndarray, mu: np.ndarray, alpha: float) -> float:
    if alpha < _ALPHA_MIN:
        return poisson_loglik(y, mu)
    theta = 1.0 / alpha
    return float(
        np.sum(
            _lgamma_diff(y, theta)
            - special.gammaln(y + 1.0)
            + theta * (math.log(theta) - np.log(theta + mu))
            + y * (np.log(mu) - np.log(theta + mu))
        )
    )


def poisson_loglik(y: np.ndarray, mu: np.ndarray) -> float:
    return float(np.sum(y * np.log(mu) - mu - special.gammaln(y + 1.0)))


def _int_counts(y: np.ndarray) -> tuple[np.ndarray, int]:
    y_int = y.astype(np.int64)
    return y_int, (int(y_int.max()) if y_int.size else 0)


def _digamma_diff(y: np.ndarray, theta: float) -> np.ndarray:
    """psi(y + theta) - psi(theta) for integer counts, via the recurrence
    psi(x + 1) = psi(x) + 1/x (exact, and fast for large theta)."""
    y_int, m_max = _int_counts(y)
    if m_max == 0:
        return np.zeros(y_int.shape)
    cum = np.concatenate([[0.0], np.cumsum(1.0 / (theta + np.arange(m_max)))])
    return cum[y_int]


def _trigamma_diff(y: np.ndarray, theta: float) -> np.ndarray:
    y_int, m_max = _int_counts(y)
    if m_max == 0:
        return np.zeros(y_int.shape)
    cum = np.concatenate([[0.0], np.cumsum(-1.0 / (theta + np.arange(m_max)) ** 2)])
    return cum[y_int]


def _lgamma_diff(y: np.ndarray, theta: float) -> np.ndarray:
    """gammaln(y + theta) - gammaln(theta) for integer counts."""
    y_int, m_max = _int_counts(y)
    if m_max == 0:
        return np.zeros(y_int.shape)
    cum = np.concatenate([[0.0], np.cumsum(np.log(theta + np.arange(m_max)))])
    return cum[y_int]


def _alpha_score_terms(y: np.ndarray, mu: np.ndarray, alpha: float) -> np.ndarray:
    """Per-observation d loglik / d alpha at interior alpha."""
    theta = 1.0 / alpha
    h = (
        _digamma_diff(y, theta)
        + math.log(theta)
        + 1.0
        - np.log(theta + mu)
        - (theta + y) / (theta + mu)
    )
    return -(theta**2) * h


def _alpha_score_at_zero(y: np.ndarray, mu: np.ndarray) -> float:
    # limit of d loglik / d alpha as alpha -> 0+ (overdispersion score)
    return float(0.5 * np.sum((y - mu) ** 2 - y))


def _alpha_hessian(y: np.ndarray, mu: np.ndarray, alpha: float) -> float:
    theta = 1.0 / alpha
    h = (
        _digamma_diff(y, theta)
        + math.log(theta)
        + 1.0
        - np.log(theta + mu)
        - (theta + y) / (theta + mu)
    )
    hp = (
        _trigamma_diff(y, theta)
        + 1.0 / theta
        - 2.0 / (theta + mu)
        + (theta + y) / (theta + mu) ** 2
    )
    return float(np.sum(2.0 * theta**3 * h + theta**4 * hp))


def _solve_profile_alpha(y: np.ndarray, mu: np.ndarray, alpha0: float, tol: float) -> tuple[float, bool]:
    """Maximize the profile likelihood over alpha; returns (alpha, boundary).

    Newton iterations on d loglik / d alpha, safeguarded by a bisection
    bracket. A non-positive slope at alpha -> 0+ puts the optimum on the
    boundary (equidispersion): alpha = 0.
    """
    if _alpha_score_at_zero(y, mu) <= 0.0:
        return 0.0, True

    def slope(a: float) -> float:
        return float(np.sum(_alpha_score_terms(y, mu, a)))

    lo = _ALPHA_MIN
    hi = max(2.0 * alpha0, 0.5)
    for _ in range(80):
        if slope(hi) < 0.0:
            break
        lo = hi
        hi *= 2.0
    else:
        return hi, False  # dispersion effectively unbounded; caller reports non-convergence

    a = min(max(alpha0, lo * 2), hi * 0.5) if lo * 2 < hi * 0.5 else 0.5 * (lo + hi)
    for _ in range(100):
        g = slope(a)
        if g > 0.0:
            lo = a
        else:
            hi = a
        curv = _alpha_hessian(y, mu, a)
        if curv < 0.0:
            step = g / curv
            a_new = a - step
        else:
            a_new = 0.5 * (lo + hi)
        if not math.isfinite(a_new) or not (lo < a_new < hi):
            a_new = 0.5 * (lo + hi)
        if abs(a_new - a) < tol * max(1.0, a):
            return a_new, False
        a = a_new
    return a, False


def _joint_gradient(X: np.ndarray, y: np.ndarray, beta: np.ndarray, alpha: float, family: str) -> np.ndarray:
    mu = _mu_from_eta(X @ beta)
    if family == FAMILY_POISSON or alpha < _ALPHA_MIN:
        g_beta = X.T @ (y - mu)
        if family == FAMILY_POISSON:
            return g_beta
        return np.concatenate([g_beta, [_alpha_score_at_zero(y, mu)]])
    resid = (y - mu) / (1.0 + alpha * mu)
    g_beta = X.T @ resid
    g_alpha = float(np.sum(_alpha_score_terms(y, mu, alpha)))
    return np.concatenate([g_beta, [g_alpha]])


def _joint_hessian(X: np.ndarray, y: np.ndarray, beta: np.ndarray, alpha: float, family: str) -> np.ndarray:
    """Observed information (negative of this) for (beta[, alpha])."""
    mu = _mu_from_eta(X @ beta)
    if family == FAMILY_POISSON or alpha < _ALPHA_MIN:
        W = mu
        H = -(X.T * W) @ X
        return H
    denom = 1.0 + alpha * mu
    w_bb = mu * (1.0 + alpha * y) / denom**2
    H_bb = -(X.T * w_bb) @ X
    d_ba = -mu * (y - mu) / denom**2
    H_ba = X.T @ d_ba
    H_aa = _alpha_hessian(y, mu, alpha)
    k = X.shape[1]
    H = np.empty((k + 1, k + 1))
    H[:k, :k] = H_bb
    H[:k, k] = H_ba
    H[k, :k] = H_ba
    H[k, k] = H_aa
    return H


def _loglik(
    X: np.ndarray,
    y: np.ndarray,
    beta: np.ndarray,
    alpha: float,
    family: str,
    lgamma_y1_sum: float | None = None,
) -> float:
    mu = _mu_from_eta(X @ beta)
    if lgamma_y1_sum is None:
        lgamma_y1_sum = float(np.sum(special.gammaln(y + 1.0)))
    if family == FAMILY_POISSON or alpha < _ALPHA_MIN:
        return float(np.sum(y * np.log(mu) - mu)) - lgamma_y1_sum
    theta = 1.0 / alpha
    core = float(
        np.sum(
            _lgamma_diff(y, theta)
            + theta * (math.log(theta) - np.log(theta + mu))
            + y * (np.log(mu) - np.log(theta + mu))
        )
    )
    return core - lgamma_y1_sum


def _initial_beta(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    target = np.log(y + 0.5)
    beta, *_ = np.linalg.lstsq(X, target, rcond=None)
    return beta


def _fit_count_family(
    design: DesignMatrix,
    family: str,
    tol: float = 1e-8,
    max_iter: int = 200,
    start: tuple[np.ndarray, float] | None = None,
) -> FittedModel:
    X = design.matrix
    y = design.response
    n, k = X.shape
    if n < k:
        raise FitError(f"{n} rows cannot identify {k} coefficients")
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise FitError("response must be non-negative integers")

    if start is not None:
        # warm start (bootstrap replicates): rank issues surface in the solve
        beta = np.array(start[0], dtype=float)
        alpha = float(start[1])
    else:
        rank = np.linalg.matrix_rank(X)
        if rank < k:
            raise FitError(f"design is rank deficient (rank {rank} < {k} columns)")
        beta = _initial_beta(X, y)
        alpha = 0.1 if family == FAMILY_NEGBIN else 0.0
    if family == FAMILY_POISSON:
        alpha = 0.0

    lg1 = float(np.sum(special.gammaln(y + 1.0)))
    boundary = False
    converged = False
    ll = _loglik(X, y, beta, alpha, family, lg1)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        mu = _mu_from_eta(X @ beta)
        if family == FAMILY_NEGBIN and alpha >= _ALPHA_MIN:
            W = mu / (1.0 + alpha * mu)
        else:
            W = mu
        z = (X @ beta) + (y - mu) / np.maximum(mu, 1e-300)
        XtW = X.T * W
        try:
            beta_new = np.linalg.solve(XtW @ X, XtW @ z)
        except np.linalg.LinAlgError as exc:
            raise FitError(f"weighted normal equations singular: {exc}") from None

        # step-halving keeps the likelihood monotone when IRLS overshoots
        step = beta_new - beta
        ll_new = _loglik(X, y, beta_new, alpha, family, lg1)
        halvings = 0
        while not math.isfinite(ll_new) or ll_new < ll - 1e-10:
            halvings += 1
            if halvings > 40:
                break
            beta_new = beta + step / (2.0**halvings)
            ll_new = _loglik(X, y, beta_new, alpha, family, lg1)

        alpha_new = alpha
        if family == FAMILY_NEGBIN:
            mu_new = _mu_from_eta(X @ beta_new)
            alpha_new, boundary = _solve_profile_alpha(y, mu_new, max(alpha, 0.05), tol)
        delta = max(float(np.max(np.abs(beta_new - beta))), abs(alpha_new - alpha))
        beta = beta_new
        alpha = alpha_new
        ll = _loglik(X, y, beta, alpha, family, lg1)
        if delta < tol:
            converged = True
            break

    # joint Newton polish drives the score to numerical zero
    if converged and not (family == FAMILY_NEGBIN and boundary):
        for _ in range(6):
            grad = _joint_gradient(X, y, beta, alpha, family)
            if float(np.max(np.abs(grad))) < 10.0 * tol:
                break
            H = _joint_hessian(X, y, beta, alpha, family)
            try:
                step = np.linalg.solve(H, -grad)
            except np.linalg.LinAlgError:
                break
            if family == FAMILY_NEGBIN:
                beta_try = beta + step[:k]
                alpha_try = alpha + float(step[k])
                if alpha_try < _ALPHA_MIN:
                    break
            else:
                beta_try = beta + step
                alpha_try = alpha
            if _loglik(X, y, beta_try, alpha_try, family, lg1) < ll - 1e-9:
                break
            beta, alpha = beta_try, alpha_try
            ll = _loglik(X, y, beta, alpha, family, lg1)

    mu = _mu_from_eta(X @ beta)
    if family == FAMILY_NEGBIN and boundary:
        alpha = 0.0

    cov_params = list(design.columns)
    if family == FAMILY_NEGBIN and not boundary:
        cov_params = cov_params + ["dispersion_alpha"]
    H = _joint_hessian(X, y, beta, alpha if not boundary else 0.0, family if not boundary else FAMILY_POISSON)
    if family == FAMILY_NEGBIN and boundary:
        H = _joint_hessian(X, y, beta, 0.0, FAMILY_POISSON)
    try:
        covariance = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        covariance = np.full((len(cov_params), len(cov_params)), np.nan)

    k_model = k + (1 if family == FAMILY_NEGBIN else 0)
    return FittedModel(
        family=family,
        columns=list(design.columns),
        coefficients={c: float(b) for c, b in zip(design.columns, beta)},
        covariance=covariance,
        cov_params=cov_params,
        cov_type="observed_information",
        log_likelihood=ll,
        aic=aic_from_ll(ll, k_model),
        bic=bic_from_ll(ll, k_model, n),
        n_obs=n,
        n_clusters=design.n_clusters,
        converged=converged,
        iterations=iterations,
        spec=design.spec,
        dispersion_alpha=(float(alpha) if family == FAMILY_NEGBIN else None),
        alpha_boundary=boundary,
        floored_rows=design.floored_rows,
    )


def fit_negbin(
    design: DesignMatrix,
    tol: float = 1e-8,
    max_iter: int = 200,
    start: tuple[np.ndarray, float] | None = None,
) -> FittedModel:
    """NB2 maximum likelihood; alpha on the 0 boundary is flagged, not an error."""
    return _fit_count_family(design, FAMILY_NEGBIN, tol=tol, max_iter=max_iter, start=start)


def fit_poisson(design: DesignMatrix, tol: float = 1e-8, max_iter: int = 200) -> FittedModel:
    """Poisson maximum likelihood (equidispersion: variance = mean)."""
    return _fit_count_family(design, FAMILY_POISSON, tol=tol, max_iter=max_iter)


def fit_ols_log(design: DesignMatrix) -> FittedModel:
    """OLS on ln(flow), positive flows only.

    Kept as the historically common baseline; its likelihood lives on the log
    scale and is flagged non-comparable to the count families.
    """
    mask = design.response > 0
    excluded = int((~mask).sum())
    X = design.matrix[mask]
    y = np.log(design.response[mask])
    n, k = X.shape
    if n == 0:
        raise FitError("all responses are zero; nothing to fit on the log scale")
    if np.linalg.matrix_rank(X) < k:
        raise FitError("design is rank deficient after dropping zero rows")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    rss = float(resid @ resid)
    sigma2_mle = rss / n
    ll = -0.5 * n * (math.log(2.0 * math.pi * sigma2_mle) + 1.0)
    dof = max(n - k, 1)
    covariance = rss / dof * np.linalg.inv(X.T @ X)
    k_model = k + 1  # residual variance
    return FittedModel(
        family=FAMILY_OLS_LOG,
        columns=list(design.columns),
        coefficients={c: float(b) for c, b in zip(design.columns, beta)},
        covariance=covariance,
        cov_params=list(design.columns),
        cov_type="ols_classical",
        log_likelihood=ll,
        aic=aic_from_ll(ll, k_model),
        bic=bic_from_ll(ll, k_model, n),
        n_obs=n,
        n_clusters=len({c for c, m in zip(design.cluster_ids, mask) if m}),
        converged=True,
        iterations=1,
        spec=design.spec,
        ll_comparable_counts=False,
        excluded_zero_rows=excluded,
        floored_rows=design.floored_rows,
    )


# ---------------------------------------------------------------------------
# Clustered inference
# ---------------------------------------------------------------------------

def _score_matrix(fit: FittedModel, design: DesignMatrix) -> np.ndarray:
    """Per-observation score contributions in cov_params order."""
    X = design.matrix
    y = design.response
    beta = fit.beta()
    if fit.family == FAMILY_OLS_LOG:
        mask = y > 0
        resid = np.log(y[mask]) - X[mask] @ beta
        return X[mask] * resid[:, None]
    mu = _mu_from_eta(X @ beta)
    alpha = float(fit.dispersion_alpha or 0.0)
    if fit.family == FAMILY_POISSON or alpha < _ALPHA_MIN:
        scores = X * (y - mu)[:, None]
        if fit.family == FAMILY_NEGBIN and "dispersion_alpha" in fit.cov_params:
            s_alpha = 0.5 * ((y - mu) ** 2 - y)
            scores = np.column_stack([scores, s_alpha])
        return scores
    resid = (y - mu) / (1.0 + alpha * mu)
    scores = X * resid[:, None]
    if "dispersion_alpha" in fit.cov_params:
        scores = np.column_stack([scores, _alpha_score_terms(y, mu, alpha)])
    return scores


def _bread(fit: FittedModel, design: DesignMatrix) -> np.ndarray:
    if fit.family == FAMILY_OLS_LOG:
        mask = design.response > 0
        X = design.matrix[mask]
        return np.linalg.inv(X.T @ X)
    family = fit.family
    alpha = float(fit.dispersion_alpha or 0.0)
    if fit.family == FAMILY_NEGBIN and "dispersion_alpha" not in fit.cov_params:
        family = FAMILY_POISSON  # boundary fit: alpha block absent
    H = _joint_hessian(design.matrix, design.response, fit.beta(), alpha, family)
    return np.linalg.inv(-H)


def cr1_factor(n_obs: int, n_clusters: int, k_params: int) -> float:
    if n_clusters < 2:
        raise ValueError("clustered covariance needs at least two clusters")
    return (n_clusters / (n_clusters - 1.0)) * ((n_obs - 1.0) / (n_obs - k_params))


def clustered_covariance(fit: FittedModel, design: DesignMatrix) -> FittedModel:
    """Sandwich covariance with scores summed within origin clusters (CR1).

    Returns a copy of the fit with the covariance replaced; k in the CR1
    small-sample factor counts the parameters inside the sandwich.
    """
    scores = _score_matrix(fit, design)
    if fit.family == FAMILY_OLS_LOG:
        cluster_ids = [c for c, m in zip(design.cluster_ids, design.response > 0) if m]
    else:
        cluster_ids = design.cluster_ids
    order: dict[str, int] = {}
    for cid in cluster_ids:
        if cid not in order:
            order[cid] = len(order)
    G = len(order)
    idx = np.fromiter((order[c] for c in cluster_ids), dtype=np.int64, count=len(cluster_ids))
    sums = np.zeros((G, scores.shape[1]))
    np.add.at(sums, idx, scores)
    meat = sums.T @ sums
    bread = _bread(fit, design)
    n = scores.shape[0]
    factor = cr1_factor(n, G, scores.shape[1])
    cov = factor * bread @ meat @ bread
    cov = 0.5 * (cov + cov.T)
    return dataclasses.replace(fit, covariance=cov, cov_type="cluster_robust_cr1", n_clusters=G)


# ---------------------------------------------------------------------------
# Prediction and evaluation
# ---------------------------------------------------------------------------

def predict_flow(fit: FittedModel, row: dict[str, float]) -> float:
    """Expected flow for one predictor row: exp(linear predictor), always > 0."""
    eta = 0.0
    for name, coef in fit.coefficients.items():
        if name == "intercept":
            eta += coef
            continue
        if name not in row:
            raise KeyError(f"missing predictor '{name}'")
        eta += coef * float(row[name])
    return math.exp(eta)


def eval_metrics(fit: FittedModel, design: DesignMatrix) -> dict[str, float]:
    """MAE and RMSE of fitted means against observed counts on the estimation rows."""
    mu = _mu_from_eta(design.matrix @ fit.beta())
    if fit.family == FAMILY_OLS_LOG:
        mask = design.response > 0
        err = design.response[mask] - np.exp(design.matrix[mask] @ fit.beta())
    else:
        err = design.response - mu
    return {
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(math.sqrt(np.mean(err**2))),
    }


# ---------------------------------------------------------------------------
# Model hierarchy comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonRow:
    label: str
    log_likelihood: float
    aic: float
    bic: float
    k_params: int
    lrt_stat: float | None
    p_value: float | None
    dispersion_alpha: float | None


@dataclass
class ModelComparison:
    rows: list[ComparisonRow] = field(default_factory=list)


def lrt_from_ll(ll_restricted: float, ll_full: float) -> float:
    return 2.0 * (ll_full - ll_restricted)


def chi2_p_value(stat: float, df: int) -> float:
    if df <= 0:
        return 1.0 if stat <= 1e-9 else 0.0
    from scipy.stats import chi2

    return float(chi2.sf(stat, df))


def compare_models(fits: list[FittedModel]) -> ModelComparison:
    """Tabulate a model ladder with LRTs against each preceding fit.

    The LRT row is filled only when the current model nests the previous one
    (previous columns are a subset, same observations); otherwise the stat is
    suppressed and AIC/BIC still shown. Identical adjacent specifications get
    stat 0.00 with p = 1.
    """
    comparison = ModelComparison()
    prev: FittedModel | None = None
    for fit in fits:
        lrt: float | None = None
        p: float | None = None
        if prev is not None:
            nested = set(prev.columns) <= set(fit.columns) and prev.n_obs == fit.n_obs
            comparable = prev.ll_comparable_counts and fit.ll_comparable_counts
            if nested and comparable:
                stat = lrt_from_ll(prev.log_likelihood, fit.log_likelihood)
                if stat < 0 and stat > -1e-6:
                    stat = 0.0
                df = len(fit.columns) - len(prev.columns)
                lrt = stat
                p = chi2_p_value(stat, df)
        comparison.rows.append(
            ComparisonRow(
                label=fit.label or fit.family,
                log_likelihood=fit.log_likelihood,
                aic=fit.aic,
                bic=fit.bic,
                k_params=fit.k_params,
                lrt_stat=lrt,
                p_value=p,
                dispersion_alpha=fit.dispersion_alpha,
            )
        )
        prev = fit
    return comparison


def ladder_specs(base: ModelSpec | None = None) -> list[tuple[str, ModelSpec]]:
    """The stepwise specification ladder used by the `compare` command.

    Each step nests the previous one, so log-likelihoods are non-decreasing
    along the ladder. The last row repeats the full specification as the
    selected model, which exercises the identical-adjacent-models LRT case.
    """
    base = base or ModelSpec()
    off = dataclasses.replace(
        base,
        include_rating=False,
        include_origin_region_fe=False,
        include_dest_region_fe=False,
        include_origin_income=False,
        include_dest_income=False,
    )
    steps = [
        ("distance + cost", off),
        ("+ school rating", dataclasses.replace(off, include_rating=True)),
        ("+ origin region FE", dataclasses.replace(off, include_rating=True, include_origin_region_fe=True)),
        (
            "+ destination region FE",
            dataclasses.replace(
                off, include_rating=True, include_origin_region_fe=True, include_dest_region_fe=True
            ),
        ),
        (
            "+ origin income",
            dataclasses.replace(
                off,
                include_rating=True,
                include_origin_region_fe=True,
                include_dest_region_fe=True,
                include_origin_income=True,
            ),
        ),
        (
            "+ destination income",
            dataclasses.replace(
                off,
                include_rating=True,
                include_origin_region_fe=True,
                include_dest_region_fe=True,
                include_origin_income=True,
                include_dest_income=True,
            ),
        ),
        (
            "full specification",
            dataclasses.replace(
                off,
                include_rating=True,
                include_origin_region_fe=True,
                include_dest_region_fe=True,
                include_origin_income=True,
                include_dest_income=True,
            ),
        ),
    ]
    return steps


# ---------------------------------------------------------------------------
# Cluster bootstrap
# ---------------------------------------------------------------------------

@dataclass
class BootstrapReport:
    coefficients: dict[str, tuple[float, float, float]]  # (lower 2.5, median, upper 97.5)
    dispersion: tuple[float, float, float] | None
    metrics: dict[str, tuple[float, float, float]]
    B: int
    seed: int
    failed_replicates: int

    def contains(self, name: str, value: float) -> bool:
        lo, _, hi = self.coefficients[name]
        return lo <= value <= hi


def _percentile_triplet(values: np.ndarray) -> tuple[float, float, float]:
    lo, med, hi = np.percentile(values, [2.5, 50.0, 97.5])
    return float(lo), float(med), float(hi)


def cluster_bootstrap(
    snapshot: SystemSnapshot,
    spec: ModelSpec,
    B: int,
    seed: int = 0,
    tol: float = 1e-8,
) -> BootstrapReport:
    """Percentile CIs from resampling whole origin clusters with replacement.

    Every replicate redraws G clusters (clusters may repeat, all of a sampled
    cluster's rows enter), refits the NB model warm-started at the full-data
    estimates, and records coefficients plus in-replicate MAE/RMSE. Replicates
    that fail to converge or lose identification are counted and excluded.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    design = build_design(snapshot, spec)
    full_fit = fit_negbin(design, tol=tol)
    start = (full_fit.beta(), max(full_fit.dispersion_alpha or 0.05, 0.05))

    cluster_order: dict[str, int] = {}
    for cid in design.cluster_ids:
        if cid not in cluster_order:
            cluster_order[cid] = len(cluster_order)
    G = len(cluster_order)
    rows_of: list[list[int]] = [[] for _ in range(G)]
    for i, cid in enumerate(design.cluster_ids):
        rows_of[cluster_order[cid]].append(i)
    row_arrays = [np.asarray(rows, dtype=np.int64) for rows in rows_of]

    coef_samples: list[np.ndarray] = []
    alpha_samples: list[float] = []
    mae_samples: list[float] = []
    rmse_samples: list[float] = []
    failed = 0
    for b in range(B):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(b,)))
        chosen = rng.integers(0, G, size=G)
        rows = np.concatenate([row_arrays[g] for g in chosen])
        # cluster identity is irrelevant inside a replicate (point estimates only)
        sub = DesignMatrix(
            response=design.response[rows],
            matrix=design.matrix[rows],
            columns=design.columns,
            cluster_ids=[],
            row_keys=[],
            spec=spec,
            floored_rows=0,
        )
        try:
            fit = fit_negbin(sub, tol=tol, start=start)
        except (FitError, np.linalg.LinAlgError):
            failed += 1
            continue
        if not fit.converged:
            failed += 1
            continue
        coef_samples.append(fit.beta())
        alpha_samples.append(float(fit.dispersion_alpha or 0.0))
        m = eval_metrics(fit, sub)
        mae_samples.append(m["mae"])
        rmse_samples.append(m["rmse"])

    if not coef_samples:
        raise FitError("every bootstrap replicate failed")
    coefs = np.vstack(coef_samples)
    report = BootstrapReport(
        coefficients={
            name: _percentile_triplet(coefs[:, j]) for j, name in enumerate(design.columns)
        },
        dispersion=_percentile_triplet(np.asarray(alpha_samples)),
        metrics={
            "mae": _percentile_triplet(np.asarray(mae_samples)),
            "rmse": _percentile_triplet(np.asarray(rmse_samples)),
        },
        B=B,
        seed=seed,
        failed_replicates=failed,
    )
    return report
