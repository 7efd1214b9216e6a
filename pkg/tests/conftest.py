from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gravflow.data import (
    FeederFlow,
    ODRecord,
    PAIR_EXISTING,
    PAIR_HYPOTHETICAL,
    School,
    SyntheticConfig,
    SystemSnapshot,
    generate_synthetic,
)


def make_origin(school_id="O1", region="NCR", income=5e8, enrollment=100):
    return School(
        school_id=school_id,
        sector="public_origin",
        region=region,
        lgu_income=income,
        enrollment_g6=enrollment,
    )


def make_esc(school_id="E1", region="NCR", income=5e8, rating=3, tuition=30.0, slots=50):
    return School(
        school_id=school_id,
        sector="esc_destination",
        region=region,
        lgu_income=income,
        rating=rating,
        tuition=tuition,
        slots=slots,
    )


def make_public_dest(school_id="P1", region="NCR", income=5e8, congested=True):
    return School(
        school_id=school_id,
        sector="public_destination",
        region=region,
        lgu_income=income,
        is_congested=congested,
    )


def make_pair(origin="O1", dest="E1", flow=5, distance=10.0, cost=20.0):
    return ODRecord(
        origin_id=origin,
        dest_id=dest,
        observed_flow=flow,
        distance_km=distance,
        net_cost=cost,
        pair_class=PAIR_EXISTING if flow > 0 else PAIR_HYPOTHETICAL,
    )


def make_snapshot(schools, od, feeder=(), subsidy_baseline=10.0, metadata=None):
    return SystemSnapshot(
        schools=list(schools),
        od=list(od),
        feeder_flows=list(feeder),
        subsidy_baseline=subsidy_baseline,
        metadata=metadata or {},
    )


@pytest.fixture(scope="session")
def small_synthetic():
    """A mid-sized synthetic system shared by read-only tests."""
    config = SyntheticConfig(n_origins=150, n_esc=50, n_public_dest=30, rng_seed=20240811)
    return generate_synthetic(config)


@pytest.fixture
def two_school_dir(tmp_path):
    """Smallest valid on-disk snapshot: one origin, one ESC school, one pair."""
    (tmp_path / "schools.csv").write_text(
        "school_id,sector,region,lgu_income,rating,tuition_thousands,slots,enrollment_g6,is_congested\n"
        "O1,public_origin,NCR,500000000,,,,100,\n"
        "E1,esc_destination,NCR,400000000,3,30.0,50,,\n",
        encoding="utf-8",
    )
    (tmp_path / "od_pairs.csv").write_text(
        "origin_id,dest_id,observed_flow,distance_km,net_cost_thousands\nO1,E1,5,10.0,20.0\n",
        encoding="utf-8",
    )
    (tmp_path / "feeder_flows.csv").write_text("origin_id,public_dest_id,flow\n", encoding="utf-8")
    (tmp_path / "snapshot.json").write_text(
        '{"schools": "schools.csv", "od_pairs": "od_pairs.csv", '
        '"feeder_flows": "feeder_flows.csv", "subsidy_baseline": 10.0, "metadata": {}}\n',
        encoding="utf-8",
    )
    return tmp_path
