"""School-network snapshot: domain types, CSV I/O, validation, synthetic systems.

A snapshot is the unit of input for estimation and simulation. On disk it is
three UTF-8 CSV files (schools, od_pairs, feeder_flows) plus a ``snapshot.json``
manifest carrying the subsidy baseline and provenance metadata. Empty CSV cells
mean "not applicable for this sector". Constructed snapshots are treated as
immutable and are safe to share across threads.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SECTOR_ORIGIN = "public_origin"
SECTOR_ESC = "esc_destination"
SECTOR_PUBLIC_DEST = "public_destination"
SECTORS = (SECTOR_ORIGIN, SECTOR_ESC, SECTOR_PUBLIC_DEST)

PAIR_EXISTING = "existing"
PAIR_HYPOTHETICAL = "hypothetical"

SCHOOLS_FILE = "schools.csv"
OD_FILE = "od_pairs.csv"
FEEDER_FILE = "feeder_flows.csv"
MANIFEST_FILE = "snapshot.json"

_SCHOOL_COLUMNS = [
    "school_id",
    "sector",
    "region",
    "lgu_income",
    "rating",
    "tuition_thousands",
    "slots",
    "enrollment_g6",
    "is_congested",
]
_OD_COLUMNS = ["origin_id", "dest_id", "observed_flow", "distance_km", "net_cost_thousands"]
_FEEDER_COLUMNS = ["origin_id", "public_dest_id", "flow"]


class SnapshotFormatError(Exception):
    """Structural defect in an input file, located by file/row/column."""

    def __init__(self, message: str, file: str = "", row: int | None = None, column: str = ""):
        self.file = file
        self.row = row
        self.column = column
        where = file
        if row is not None:
            where += f":row {row}"
        if column:
            where += f":column '{column}'"
        super().__init__(f"{where}: {message}" if where else message)


class SnapshotValidationError(Exception):
    """Snapshot parsed but violates a domain invariant."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        head = "; ".join(violations[:5])
        more = f" (+{len(violations) - 5} more)" if len(violations) > 5 else ""
        super().__init__(f"invalid snapshot: {head}{more}")


@dataclass(frozen=True)
class School:
    school_id: str
    sector: str
    region: str
    lgu_income: float
    rating: int | None = None          # ESC destinations only
    tuition: float | None = None       # thousands of pesos, ESC destinations only
    slots: int | None = None           # ESC destinations only
    enrollment_g6: int | None = None   # origins only
    is_congested: bool | None = None   # public destinations only


@dataclass(frozen=True)
class ODRecord:
    origin_id: str
    dest_id: str
    observed_flow: int
    distance_km: float
    net_cost: float                    # thousands of pesos; may be <= 0
    pair_class: str


@dataclass(frozen=True)
class FeederFlow:
    origin_id: str
    public_dest_id: str
    flow: int


class SystemSnapshot:
    """Immutable view of one transition cohort's school network."""

    def __init__(
        self,
        schools: list[School],
        od: list[ODRecord],
        feeder_flows: list[FeederFlow],
        subsidy_baseline: float,
        metadata: dict[str, str] | None = None,
        congested_set: set[str] | None = None,
    ):
        self.schools = tuple(schools)
        self.od = tuple(od)
        self.feeder_flows = tuple(feeder_flows)
        self.subsidy_baseline = float(subsidy_baseline)
        self.metadata = dict(metadata or {})
        self.schools_by_id: dict[str, School] = {}
        for s in self.schools:
            self.schools_by_id.setdefault(s.school_id, s)
        if congested_set is None:
            congested_set = {
                s.school_id
                for s in self.schools
                if s.sector == SECTOR_PUBLIC_DEST and s.is_congested
            }
        self.congested_set = frozenset(congested_set)

    def origins(self) -> list[School]:
        return [s for s in self.schools if s.sector == SECTOR_ORIGIN]

    def esc_destinations(self) -> list[School]:
        return [s for s in self.schools if s.sector == SECTOR_ESC]

    def public_destinations(self) -> list[School]:
        return [s for s in self.schools if s.sector == SECTOR_PUBLIC_DEST]

    def regions(self) -> list[str]:
        return sorted({s.region for s in self.schools})

    def esc_flow_by_origin(self) -> dict[str, int]:
        """Observed beneficiary students leaving each origin for ESC schools."""
        totals: dict[str, int] = {}
        for rec in self.od:
            totals[rec.origin_id] = totals.get(rec.origin_id, 0) + rec.observed_flow
        return totals

    def observed_flow_by_dest(self) -> dict[str, int]:
        totals: dict[str, int] = {}
        for rec in self.od:
            totals[rec.dest_id] = totals.get(rec.dest_id, 0) + rec.observed_flow
        return totals

    def congested_feeding_origins(self) -> frozenset[str]:
        """Origins observed to send students into at least one congested public school."""
        return frozenset(
            f.origin_id
            for f in self.feeder_flows
            if f.flow > 0 and f.public_dest_id in self.congested_set
        )


def validate_snapshot(snapshot: SystemSnapshot) -> list[str]:
    """Check every domain invariant; returns one message per violation.

    An empty list means the snapshot is valid. Violations are data, not
    exceptions: callers decide whether to abort.
    """
    v: list[str] = []
    seen: set[str] = set()
    for s in snapshot.schools:
        if s.school_id in seen:
            v.append(f"duplicate school_id '{s.school_id}'")
        seen.add(s.school_id)
        if s.sector not in SECTORS:
            v.append(f"school '{s.school_id}': unknown sector '{s.sector}'")
            continue
        if not s.region:
            v.append(f"school '{s.school_id}': empty region")
        if not (s.lgu_income > 0):
            v.append(f"school '{s.school_id}': lgu_income must be positive (log-transformed downstream)")
        esc_fields = (s.rating, s.tuition, s.slots)
        if s.sector == SECTOR_ESC:
            if any(f is None for f in esc_fields):
                v.append(f"school '{s.school_id}': ESC destination missing rating/tuition/slots")
            else:
                if s.rating < 0:
                    v.append(f"school '{s.school_id}': rating must be >= 0")
                if s.tuition < 0:
                    v.append(f"school '{s.school_id}': tuition must be >= 0")
                if s.slots < 0:
                    v.append(f"school '{s.school_id}': slots must be >= 0")
        elif any(f is not None for f in esc_fields):
            v.append(f"school '{s.school_id}': rating/tuition/slots only apply to ESC destinations")
        if s.sector == SECTOR_ORIGIN:
            if s.enrollment_g6 is None:
                v.append(f"school '{s.school_id}': origin missing enrollment_g6")
            elif s.enrollment_g6 < 0:
                v.append(f"school '{s.school_id}': enrollment_g6 must be >= 0")
        elif s.enrollment_g6 is not None:
            v.append(f"school '{s.school_id}': enrollment_g6 only applies to origins")
        if s.sector == SECTOR_PUBLIC_DEST:
            if s.is_congested is None:
                v.append(f"school '{s.school_id}': public destination missing is_congested")
        elif s.is_congested is not None:
            v.append(f"school '{s.school_id}': is_congested only applies to public destinations")

    by_id = snapshot.schools_by_id
    pair_keys: set[tuple[str, str]] = set()
    for rec in snapshot.od:
        key = (rec.origin_id, rec.dest_id)
        if key in pair_keys:
            v.append(f"duplicate od pair {key}")
        pair_keys.add(key)
        origin = by_id.get(rec.origin_id)
        dest = by_id.get(rec.dest_id)
        if origin is None or origin.sector != SECTOR_ORIGIN:
            v.append(f"od pair {key}: origin_id does not resolve to a public origin school")
        if dest is None or dest.sector != SECTOR_ESC:
            v.append(f"od pair {key}: dest_id does not resolve to an ESC destination school")
        if not (rec.distance_km > 0):
            v.append(f"od pair {key}: non-positive distance")
        if rec.observed_flow < 0:
            v.append(f"od pair {key}: negative observed_flow")
        expected_class = PAIR_EXISTING if rec.observed_flow > 0 else PAIR_HYPOTHETICAL
        if rec.pair_class != expected_class:
            v.append(f"od pair {key}: pair_class '{rec.pair_class}' inconsistent with observed_flow")

    for f in snapshot.feeder_flows:
        origin = by_id.get(f.origin_id)
        dest = by_id.get(f.public_dest_id)
        if origin is None or origin.sector != SECTOR_ORIGIN:
            v.append(f"feeder flow ({f.origin_id}, {f.public_dest_id}): unknown origin")
        if dest is None or dest.sector != SECTOR_PUBLIC_DEST:
            v.append(f"feeder flow ({f.origin_id}, {f.public_dest_id}): unknown public destination")
        if f.flow < 0:
            v.append(f"feeder flow ({f.origin_id}, {f.public_dest_id}): negative flow")

    for cid in sorted(snapshot.congested_set):
        s = by_id.get(cid)
        if s is None or s.sector != SECTOR_PUBLIC_DEST or not s.is_congested:
            v.append(f"congested_set entry '{cid}' is not a congested public destination")

    outflow = snapshot.esc_flow_by_origin()
    for origin_id, total in sorted(outflow.items()):
        origin = by_id.get(origin_id)
        if origin is None or origin.sector != SECTOR_ORIGIN or origin.enrollment_g6 is None:
            continue  # dangling reference already reported
        if total > origin.enrollment_g6:
            v.append(
                f"origin '{origin_id}': beneficiary flows sum to {total} "
                f"but enrollment_g6 is {origin.enrollment_g6}"
            )
    return v


# ---------------------------------------------------------------------------
# CSV parsing helpers
# ---------------------------------------------------------------------------

def _require_columns(fieldnames: list[str] | None, required: list[str], file: str) -> None:
    have = set(fieldnames or [])
    for col in required:
        if col not in have:
            raise SnapshotFormatError("missing required column", file=file, column=col)


def _cell(raw: dict, column: str) -> str:
    value = raw.get(column)
    return value.strip() if isinstance(value, str) else ""


def _parse_float(raw: dict, column: str, file: str, row: int, required: bool = True) -> float | None:
    text = _cell(raw, column)
    if text == "":
        if required:
            raise SnapshotFormatError("empty value in required field", file=file, row=row, column=column)
        return None
    try:
        value = float(text)
    except ValueError:
        raise SnapshotFormatError(f"non-numeric field '{text}'", file=file, row=row, column=column) from None
    if not math.isfinite(value):
        raise SnapshotFormatError(f"non-finite field '{text}'", file=file, row=row, column=column)
    return value


def _parse_int(raw: dict, column: str, file: str, row: int, required: bool = True) -> int | None:
    value = _parse_float(raw, column, file, row, required)
    if value is None:
        return None
    if value != int(value):
        raise SnapshotFormatError(f"expected integer, got '{value}'", file=file, row=row, column=column)
    return int(value)


def _parse_bool(raw: dict, column: str, file: str, row: int) -> bool | None:
    text = _cell(raw, column).lower()
    if text == "":
        return None
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise SnapshotFormatError(f"expected boolean, got '{text}'", file=file, row=row, column=column)


def load_snapshot(path: str | Path) -> SystemSnapshot:
    """Load a snapshot from a manifest file or a directory containing one.

    Unknown CSV columns are ignored and row order is irrelevant. Raises
    SnapshotFormatError for structural defects (located by file/row/column)
    and SnapshotValidationError when the parsed system breaks an invariant.
    """
    path = Path(path)
    manifest_path = path / MANIFEST_FILE if path.is_dir() else path
    if not manifest_path.exists():
        raise SnapshotFormatError("manifest not found", file=str(manifest_path))
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SnapshotFormatError(f"manifest is not valid JSON: {exc}", file=str(manifest_path)) from None
    base = manifest_path.parent
    for key in ("schools", "od_pairs", "feeder_flows"):
        if key not in manifest:
            raise SnapshotFormatError(f"manifest missing '{key}' entry", file=str(manifest_path))

    schools_path = base / manifest["schools"]
    od_path = base / manifest["od_pairs"]
    feeder_path = base / manifest["feeder_flows"]
    for p in (schools_path, od_path, feeder_path):
        if not p.exists():
            raise SnapshotFormatError("listed file not found", file=str(p))

    schools: list[School] = []
    seen_ids: set[str] = set()
    fname = str(schools_path)
    with open(schools_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _require_columns(reader.fieldnames, _SCHOOL_COLUMNS, fname)
        for i, raw in enumerate(reader, start=2):  # header is row 1
            school_id = _cell(raw, "school_id")
            if not school_id:
                raise SnapshotFormatError("empty school_id", file=fname, row=i, column="school_id")
            if school_id in seen_ids:
                raise SnapshotFormatError(f"duplicate school_id '{school_id}'", file=fname, row=i, column="school_id")
            seen_ids.add(school_id)
            sector = _cell(raw, "sector")
            if sector not in SECTORS:
                raise SnapshotFormatError(f"unknown sector '{sector}'", file=fname, row=i, column="sector")
            schools.append(
                School(
                    school_id=school_id,
                    sector=sector,
                    region=_cell(raw, "region"),
                    lgu_income=_parse_float(raw, "lgu_income", fname, i),
                    rating=_parse_int(raw, "rating", fname, i, required=False),
                    tuition=_parse_float(raw, "tuition_thousands", fname, i, required=False),
                    slots=_parse_int(raw, "slots", fname, i, required=False),
                    enrollment_g6=_parse_int(raw, "enrollment_g6", fname, i, required=False),
                    is_congested=_parse_bool(raw, "is_congested", fname, i),
                )
            )

    od: list[ODRecord] = []
    fname = str(od_path)
    with open(od_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _require_columns(reader.fieldnames, _OD_COLUMNS, fname)
        for i, raw in enumerate(reader, start=2):
            origin_id = _cell(raw, "origin_id")
            dest_id = _cell(raw, "dest_id")
            if origin_id not in seen_ids:
                raise SnapshotFormatError(f"origin_id '{origin_id}' not in schools file", file=fname, row=i, column="origin_id")
            if dest_id not in seen_ids:
                raise SnapshotFormatError(f"dest_id '{dest_id}' not in schools file", file=fname, row=i, column="dest_id")
            flow = _parse_int(raw, "observed_flow", fname, i)
            od.append(
                ODRecord(
                    origin_id=origin_id,
                    dest_id=dest_id,
                    observed_flow=flow,
                    distance_km=_parse_float(raw, "distance_km", fname, i),
                    net_cost=_parse_float(raw, "net_cost_thousands", fname, i),
                    pair_class=PAIR_EXISTING if flow > 0 else PAIR_HYPOTHETICAL,
                )
            )

    feeder: list[FeederFlow] = []
    fname = str(feeder_path)
    with open(feeder_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _require_columns(reader.fieldnames, _FEEDER_COLUMNS, fname)
        for i, raw in enumerate(reader, start=2):
            origin_id = _cell(raw, "origin_id")
            dest_id = _cell(raw, "public_dest_id")
            if origin_id not in seen_ids:
                raise SnapshotFormatError(f"origin_id '{origin_id}' not in schools file", file=fname, row=i, column="origin_id")
            if dest_id not in seen_ids:
                raise SnapshotFormatError(f"public_dest_id '{dest_id}' not in schools file", file=fname, row=i, column="public_dest_id")
            feeder.append(FeederFlow(origin_id=origin_id, public_dest_id=dest_id, flow=_parse_int(raw, "flow", fname, i)))

    metadata = manifest.get("metadata", {})
    if not isinstance(metadata, dict):
        raise SnapshotFormatError("manifest 'metadata' must be an object", file=str(manifest_path))
    snapshot = SystemSnapshot(
        schools=schools,
        od=od,
        feeder_flows=feeder,
        subsidy_baseline=float(manifest.get("subsidy_baseline", 0.0)),
        metadata={str(k): str(v) for k, v in metadata.items()},
    )
    violations = validate_snapshot(snapshot)
    if violations:
        raise SnapshotValidationError(violations)
    return snapshot


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_snapshot(snapshot: SystemSnapshot, out_dir: str | Path) -> Path:
    """Write the three CSVs plus manifest under out_dir; returns the manifest path.

    Rows are written in canonical order (schools by id, pairs by key) so the
    same snapshot always produces the same bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / SCHOOLS_FILE, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_SCHOOL_COLUMNS)
        for s in sorted(snapshot.schools, key=lambda s: s.school_id):
            writer.writerow(
                [
                    s.school_id,
                    s.sector,
                    s.region,
                    _format_value(s.lgu_income),
                    _format_value(s.rating),
                    _format_value(s.tuition),
                    _format_value(s.slots),
                    _format_value(s.enrollment_g6),
                    _format_value(s.is_congested),
                ]
            )
    with open(out / OD_FILE, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_OD_COLUMNS)
        for rec in sorted(snapshot.od, key=lambda r: (r.origin_id, r.dest_id)):
            writer.writerow(
                [
                    rec.origin_id,
                    rec.dest_id,
                    rec.observed_flow,
                    _format_value(rec.distance_km),
                    _format_value(rec.net_cost),
                ]
            )
    with open(out / FEEDER_FILE, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_FEEDER_COLUMNS)
        for f in sorted(snapshot.feeder_flows, key=lambda f: (f.origin_id, f.public_dest_id)):
            writer.writerow([f.origin_id, f.public_dest_id, f.flow])
    manifest = {
        "schools": SCHOOLS_FILE,
        "od_pairs": OD_FILE,
        "feeder_flows": FEEDER_FILE,
        "subsidy_baseline": snapshot.subsidy_baseline,
        "metadata": snapshot.metadata,
    }
    manifest_path = out / MANIFEST_FILE
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


# ---------------------------------------------------------------------------
# Synthetic systems
# ---------------------------------------------------------------------------

DEFAULT_TRUE_COEFFICIENTS = {
    "intercept": 3.3944,
    "ln_distance": -0.4509,
    "ln_net_cost": -0.1004,
    "rating": -0.0204,
    "ln_origin_income": -0.0207,
    "ln_dest_income": -0.0489,
    "origin_region_R3": -0.0205,
    "origin_region_R4A": -0.0500,
    "dest_region_R3": -0.0237,
    "dest_region_R4A": 0.0178,
    "dispersion_alpha": 0.3925,
}

REGIONS = ("NCR", "R3", "R4A")


@dataclass
class SyntheticConfig:
    """Knobs for generating a synthetic school system with known ground truth."""

    n_origins: int = 200
    n_esc: int = 60
    n_public_dest: int = 40
    box_km: tuple[float, float, float, float] = (0.0, 0.0, 60.0, 60.0)
    detour_factor: float = 1.3
    true_coefficients: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TRUE_COEFFICIENTS))
    zero_pair_fraction: float = 0.0
    rng_seed: int = 0
    pairs_per_origin: int = 15
    feeders_per_origin: int = 2
    congested_share: float = 0.5
    subsidy_baseline: float = 10.0
    pool_margin_mean: float = 50.0
    slot_headroom: tuple[float, float] = (1.1, 1.8)  # contracted slots / observed inflow
    slot_minimum: int = 5
    cost_floor: float = 0.001

    def check(self) -> None:
        if self.n_origins <= 0 or self.n_esc <= 0 or self.n_public_dest <= 0:
            raise ValueError("each sector needs at least one school")
        if self.detour_factor < 1.0:
            raise ValueError("detour_factor must be >= 1")
        if not 0.0 <= self.zero_pair_fraction <= 1.0:
            raise ValueError("zero_pair_fraction must be in [0, 1]")
        if self.true_coefficients.get("dispersion_alpha", 0.0) < 0:
            raise ValueError("dispersion alpha must be >= 0")
        if self.pairs_per_origin <= 0:
            raise ValueError("pairs_per_origin must be positive")


def nb2_draws(rng: np.random.Generator, mu: np.ndarray, alpha: float) -> np.ndarray:
    """Counts with mean mu and variance mu + alpha*mu^2 (gamma-Poisson mixture)."""
    mu = np.asarray(mu, dtype=float)
    if alpha <= 0:
        return rng.poisson(mu)
    lam = rng.gamma(shape=1.0 / alpha, scale=alpha * mu)
    return rng.poisson(lam)


def generate_synthetic(config: SyntheticConfig) -> SystemSnapshot:
    """Build a snapshot whose flows follow the gravity law in true_coefficients.

    Deterministic for a fixed rng_seed. Distances are Euclidean times the
    detour factor; enrollments are set so every origin retains a candidate
    margin beyond its drawn beneficiary flows. The true coefficient vector is
    recorded in snapshot metadata for parameter-recovery tests.
    """
    config.check()
    rng = np.random.default_rng(int(config.rng_seed))
    coefs = config.true_coefficients
    x0, y0, x1, y1 = config.box_km

    def sample_points(n: int) -> np.ndarray:
        pts = np.empty((n, 2))
        pts[:, 0] = rng.uniform(x0, x1, size=n)
        pts[:, 1] = rng.uniform(y0, y1, size=n)
        return pts

    origin_ids = [f"O{i:05d}" for i in range(config.n_origins)]
    esc_ids = [f"E{i:05d}" for i in range(config.n_esc)]
    pub_ids = [f"P{i:05d}" for i in range(config.n_public_dest)]

    origin_xy = sample_points(config.n_origins)
    esc_xy = sample_points(config.n_esc)
    pub_xy = sample_points(config.n_public_dest)

    origin_region = rng.choice(REGIONS, size=config.n_origins, p=(0.4, 0.3, 0.3))
    esc_region = rng.choice(REGIONS, size=config.n_esc, p=(0.4, 0.3, 0.3))
    pub_region = rng.choice(REGIONS, size=config.n_public_dest, p=(0.4, 0.3, 0.3))

    origin_income = np.exp(rng.normal(np.log(5e8), 0.6, size=config.n_origins))
    esc_income = np.exp(rng.normal(np.log(5e8), 0.6, size=config.n_esc))
    pub_income = np.exp(rng.normal(np.log(5e8), 0.6, size=config.n_public_dest))

    esc_rating = rng.integers(0, 6, size=config.n_esc)
    # keep tuition above the subsidy so net costs stay positive (no floor rows)
    esc_tuition = np.maximum(
        np.exp(rng.normal(np.log(35.0), 0.35, size=config.n_esc)),
        config.subsidy_baseline + 1.0,
    )
    pub_congested = rng.random(config.n_public_dest) < config.congested_share
    if config.n_public_dest > 0 and not pub_congested.any():
        pub_congested[0] = True

    # pair universe: k nearest ESC destinations per origin
    k = min(config.pairs_per_origin, config.n_esc)
    diff = origin_xy[:, None, :] - esc_xy[None, :, :]
    euclid = np.sqrt((diff**2).sum(axis=2))
    neighbor_idx = np.argsort(euclid, axis=1)[:, :k]

    pair_origin: list[int] = []
    pair_dest: list[int] = []
    for oi in range(config.n_origins):
        for dj in sorted(neighbor_idx[oi]):
            pair_origin.append(oi)
            pair_dest.append(dj)
    pair_origin = np.asarray(pair_origin)
    pair_dest = np.asarray(pair_dest)
    distance = np.maximum(euclid[pair_origin, pair_dest] * config.detour_factor, 0.05)
    net_cost = esc_tuition[pair_dest] - config.subsidy_baseline

    eta = (
        coefs.get("intercept", 0.0)
        + coefs.get("ln_distance", 0.0) * np.log(distance)
        + coefs.get("ln_net_cost", 0.0) * np.log(np.maximum(net_cost, config.cost_floor))
        + coefs.get("rating", 0.0) * esc_rating[pair_dest]
        + coefs.get("ln_origin_income", 0.0) * np.log(origin_income[pair_origin])
        + coefs.get("ln_dest_income", 0.0) * np.log(esc_income[pair_dest])
    )
    for region in REGIONS[1:]:
        eta += coefs.get(f"origin_region_{region}", 0.0) * (origin_region[pair_origin] == region)
        eta += coefs.get(f"dest_region_{region}", 0.0) * (esc_region[pair_dest] == region)

    flows = nb2_draws(rng, np.exp(eta), float(coefs.get("dispersion_alpha", 0.0)))
    if config.zero_pair_fraction > 0:
        n_zero = int(round(config.zero_pair_fraction * len(flows)))
        zero_idx = rng.choice(len(flows), size=min(n_zero, len(flows)), replace=False)
        flows[zero_idx] = 0

    # contracted slots sit above current inflow: unused capacity is the point
    inflow = np.zeros(config.n_esc)
    np.add.at(inflow, pair_dest, flows)
    headroom = rng.uniform(config.slot_headroom[0], config.slot_headroom[1], size=config.n_esc)
    esc_slots = np.maximum(config.slot_minimum, np.round(inflow * headroom)).astype(int)

    od = [
        ODRecord(
            origin_id=origin_ids[oi],
            dest_id=esc_ids[dj],
            observed_flow=int(f),
            distance_km=float(d),
            net_cost=float(c),
            pair_class=PAIR_EXISTING if f > 0 else PAIR_HYPOTHETICAL,
        )
        for oi, dj, f, d, c in zip(pair_origin, pair_dest, flows, distance, net_cost)
    ]

    # feeder flows into nearby public schools drive the congested-origin set
    kf = min(config.feeders_per_origin, config.n_public_dest)
    diff_pub = origin_xy[:, None, :] - pub_xy[None, :, :]
    pub_dist = np.sqrt((diff_pub**2).sum(axis=2))
    feeder: list[FeederFlow] = []
    for oi in range(config.n_origins):
        for dj in sorted(np.argsort(pub_dist[oi])[:kf]):
            feeder.append(
                FeederFlow(
                    origin_id=origin_ids[oi],
                    public_dest_id=pub_ids[dj],
                    flow=int(rng.poisson(8.0) + 1),
                )
            )

    outflow: dict[int, int] = {}
    for oi, f in zip(pair_origin, flows):
        outflow[oi] = outflow.get(oi, 0) + int(f)
    pool_extra = rng.poisson(config.pool_margin_mean, size=config.n_origins)
    schools: list[School] = []
    for i, sid in enumerate(origin_ids):
        schools.append(
            School(
                school_id=sid,
                sector=SECTOR_ORIGIN,
                region=str(origin_region[i]),
                lgu_income=float(origin_income[i]),
                enrollment_g6=int(outflow.get(i, 0) + pool_extra[i]),
            )
        )
    for i, sid in enumerate(esc_ids):
        schools.append(
            School(
                school_id=sid,
                sector=SECTOR_ESC,
                region=str(esc_region[i]),
                lgu_income=float(esc_income[i]),
                rating=int(esc_rating[i]),
                tuition=float(esc_tuition[i]),
                slots=int(esc_slots[i]),
            )
        )
    for i, sid in enumerate(pub_ids):
        schools.append(
            School(
                school_id=sid,
                sector=SECTOR_PUBLIC_DEST,
                region=str(pub_region[i]),
                lgu_income=float(pub_income[i]),
                is_congested=bool(pub_congested[i]),
            )
        )

    metadata = {
        "generator": "gravflow.synthetic",
        "rng_seed": str(config.rng_seed),
        "true_coefficients": json.dumps(coefs, sort_keys=True),
        "config": json.dumps(
            {
                "n_origins": config.n_origins,
                "n_esc": config.n_esc,
                "n_public_dest": config.n_public_dest,
                "detour_factor": config.detour_factor,
                "zero_pair_fraction": config.zero_pair_fraction,
                "pairs_per_origin": config.pairs_per_origin,
                "subsidy_baseline": config.subsidy_baseline,
                "pool_margin_mean": config.pool_margin_mean,
                "slot_headroom": list(config.slot_headroom),
                "slot_minimum": config.slot_minimum,
            },
            sort_keys=True,
        ),
    }
    return SystemSnapshot(
        schools=schools,
        od=od,
        feeder_flows=feeder,
        subsidy_baseline=config.subsidy_baseline,
        metadata=metadata,
    )
