from __future__ import annotations

import json

import numpy as np
import pytest

from gravflow.data import (
    SnapshotFormatError,
    SnapshotValidationError,
    SyntheticConfig,
    generate_synthetic,
    load_snapshot,
    nb2_draws,
    validate_snapshot,
    write_snapshot,
)

from conftest import make_esc, make_origin, make_pair, make_public_dest, make_snapshot


class TestLoadSnapshot:
    def test_minimal_two_school_fixture(self, two_school_dir):
        snapshot = load_snapshot(two_school_dir)
        assert len(snapshot.od) == 1
        rec = snapshot.od[0]
        assert rec.origin_id == "O1" and rec.dest_id == "E1"
        assert rec.observed_flow == 5
        assert rec.pair_class == "existing"
        assert snapshot.subsidy_baseline == 10.0

    def test_dangling_dest_reference_names_row(self, two_school_dir):
        od = two_school_dir / "od_pairs.csv"
        od.write_text(
            od.read_text() + "O1,E_MISSING,2,5.0,10.0\n", encoding="utf-8"
        )
        with pytest.raises(SnapshotFormatError) as err:
            load_snapshot(two_school_dir)
        assert "E_MISSING" in str(err.value)
        assert "row 3" in str(err.value)

    def test_beneficiaries_exceed_enrollment(self, two_school_dir):
        # hand count: flows 40 + 20 = 60 > enrollment 50
        (two_school_dir / "schools.csv").write_text(
            "school_id,sector,region,lgu_income,rating,tuition_thousands,slots,enrollment_g6,is_congested\n"
            "O1,public_origin,NCR,500000000,,,,50,\n"
            "E1,esc_destination,NCR,400000000,3,30.0,50,,\n"
            "E2,esc_destination,NCR,400000000,2,25.0,40,,\n",
            encoding="utf-8",
        )
        (two_school_dir / "od_pairs.csv").write_text(
            "origin_id,dest_id,observed_flow,distance_km,net_cost_thousands\n"
            "O1,E1,40,10.0,20.0\n"
            "O1,E2,20,8.0,15.0\n",
            encoding="utf-8",
        )
        with pytest.raises(SnapshotValidationError) as err:
            load_snapshot(two_school_dir)
        assert any("sum to 60" in v for v in err.value.violations)

    def test_duplicate_school_id(self, two_school_dir):
        schools = two_school_dir / "schools.csv"
        schools.write_text(
            schools.read_text() + "O1,public_origin,NCR,500000000,,,,80,\n", encoding="utf-8"
        )
        with pytest.raises(SnapshotFormatError) as err:
            load_snapshot(two_school_dir)
        assert "duplicate school_id" in str(err.value)

    def test_missing_required_column(self, two_school_dir):
        (two_school_dir / "od_pairs.csv").write_text(
            "origin_id,dest_id,observed_flow,distance_km\nO1,E1,5,10.0\n", encoding="utf-8"
        )
        with pytest.raises(SnapshotFormatError) as err:
            load_snapshot(two_school_dir)
        assert "net_cost_thousands" in str(err.value)
        assert "missing required column" in str(err.value)

    def test_non_numeric_field_reports_location(self, two_school_dir):
        (two_school_dir / "od_pairs.csv").write_text(
            "origin_id,dest_id,observed_flow,distance_km,net_cost_thousands\nO1,E1,five,10.0,20.0\n",
            encoding="utf-8",
        )
        with pytest.raises(SnapshotFormatError) as err:
            load_snapshot(two_school_dir)
        message = str(err.value)
        assert "row 2" in message and "observed_flow" in message

    def test_unknown_columns_ignored_and_row_order_irrelevant(self, two_school_dir, tmp_path_factory):
        other = tmp_path_factory.mktemp("reordered")
        (other / "schools.csv").write_text(
            "sector,school_id,region,lgu_income,rating,tuition_thousands,slots,enrollment_g6,is_congested,comment\n"
            "esc_destination,E1,NCR,400000000,3,30.0,50,,,second\n"
            "public_origin,O1,NCR,500000000,,,,100,,first\n",
            encoding="utf-8",
        )
        for name in ("od_pairs.csv", "feeder_flows.csv", "snapshot.json"):
            (other / name).write_text((two_school_dir / name).read_text(), encoding="utf-8")
        a = load_snapshot(two_school_dir)
        b = load_snapshot(other)
        assert sorted(s.school_id for s in a.schools) == sorted(s.school_id for s in b.schools)
        assert a.od == b.od

    def test_missing_file_reported(self, two_school_dir):
        (two_school_dir / "feeder_flows.csv").unlink()
        with pytest.raises(SnapshotFormatError) as err:
            load_snapshot(two_school_dir)
        assert "not found" in str(err.value)


class TestValidateSnapshot:
    def test_valid_fixture_empty_report(self):
        snapshot = make_snapshot(
            [make_origin(), make_esc(), make_public_dest()],
            [make_pair()],
            [],
        )
        assert validate_snapshot(snapshot) == []

    def test_non_positive_distance_flagged(self):
        snapshot = make_snapshot(
            [make_origin(), make_esc()],
            [make_pair(distance=0.0)],
        )
        violations = validate_snapshot(snapshot)
        assert any("non-positive distance" in v for v in violations)

    def test_negative_income_flagged(self):
        snapshot = make_snapshot(
            [make_origin(income=-1.0), make_esc()],
            [make_pair()],
        )
        assert any("lgu_income" in v for v in validate_snapshot(snapshot))

    def test_sector_conditional_fields(self):
        snapshot = make_snapshot(
            [
                make_origin(),
                make_esc(school_id="E1", rating=None),
            ],
            [],
        )
        assert any("missing rating/tuition/slots" in v for v in validate_snapshot(snapshot))

    def test_synthetic_snapshots_always_valid(self):
        # property: every generated system passes validation
        for seed in range(100):
            config = SyntheticConfig(n_origins=8, n_esc=5, n_public_dest=3, rng_seed=seed)
            assert validate_snapshot(generate_synthetic(config)) == []


class TestRoundTrip:
    def test_write_then_load_reproduces_content(self, tmp_path, small_synthetic):
        write_snapshot(small_synthetic, tmp_path)
        loaded = load_snapshot(tmp_path)
        assert sorted(loaded.schools, key=lambda s: s.school_id) == sorted(
            small_synthetic.schools, key=lambda s: s.school_id
        )
        assert sorted(loaded.od, key=lambda r: (r.origin_id, r.dest_id)) == sorted(
            small_synthetic.od, key=lambda r: (r.origin_id, r.dest_id)
        )
        assert sorted(loaded.feeder_flows, key=lambda f: (f.origin_id, f.public_dest_id)) == sorted(
            small_synthetic.feeder_flows, key=lambda f: (f.origin_id, f.public_dest_id)
        )
        assert loaded.subsidy_baseline == small_synthetic.subsidy_baseline
        assert loaded.congested_set == small_synthetic.congested_set
        assert loaded.metadata == small_synthetic.metadata


class TestGenerateSynthetic:
    def test_same_seed_byte_identical(self, tmp_path):
        config = SyntheticConfig(n_origins=20, n_esc=10, n_public_dest=5, rng_seed=99)
        dir_a = tmp_path / "a"
        dir_b = tmp_path / "b"
        write_snapshot(generate_synthetic(config), dir_a)
        write_snapshot(generate_synthetic(config), dir_b)
        for name in ("schools.csv", "od_pairs.csv", "feeder_flows.csv", "snapshot.json"):
            assert (dir_a / name).read_bytes() == (dir_b / name).read_bytes()

    def test_zero_pair_fraction_one_forces_all_zero(self):
        config = SyntheticConfig(n_origins=10, n_esc=6, n_public_dest=3, zero_pair_fraction=1.0, rng_seed=3)
        snapshot = generate_synthetic(config)
        assert all(rec.observed_flow == 0 for rec in snapshot.od)
        assert all(rec.pair_class == "hypothetical" for rec in snapshot.od)

    def test_true_coefficients_recorded(self, small_synthetic):
        recorded = json.loads(small_synthetic.metadata["true_coefficients"])
        assert recorded["ln_distance"] == -0.4509
        assert recorded["ln_net_cost"] == -0.1004

    def test_degenerate_config_rejected(self):
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticConfig(n_origins=0))
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticConfig(detour_factor=0.5))
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticConfig(zero_pair_fraction=1.5))

    def test_distances_use_detour_factor(self):
        lean = generate_synthetic(SyntheticConfig(n_origins=5, n_esc=4, n_public_dest=2, detour_factor=1.0, rng_seed=5))
        scaled = generate_synthetic(SyntheticConfig(n_origins=5, n_esc=4, n_public_dest=2, detour_factor=2.0, rng_seed=5))
        lean_d = {(r.origin_id, r.dest_id): r.distance_km for r in lean.od}
        for rec in scaled.od:
            base = lean_d[(rec.origin_id, rec.dest_id)]
            assert rec.distance_km == pytest.approx(2.0 * base, rel=1e-12) or base == 0.05


class TestNb2Law:
    def test_variance_matches_mean_plus_alpha_mu_squared(self):
        # 1e5 draws per cell: sample variance within 10% of mu + alpha*mu^2
        rng = np.random.default_rng(7)
        for mu, alpha in [(2.0, 0.4), (10.0, 0.3925), (5.0, 0.0)]:
            draws = nb2_draws(rng, np.full(100_000, mu), alpha)
            expected_var = mu + alpha * mu * mu
            assert np.mean(draws) == pytest.approx(mu, rel=0.05)
            assert np.var(draws) == pytest.approx(expected_var, rel=0.10)
