"""Ingest, filtering, encoding, and file round-trip tests."""
import csv
import os

import numpy as np
import pytest

from helpers import random_params, separated_truth
from stylealloc.baselines import BaselineParams
from stylealloc.dataio import (
    CSV_COLUMNS,
    STANDARD_COVARIATE_NAMES,
    apply_filters,
    encode_covariates,
    load_csv,
    read_density_grid,
    read_model_file,
    write_density_grid,
    write_elpd_csv,
    write_grid_csv,
    write_model_file,
    write_records_csv,
    write_style_csv,
)
from stylealloc.errors import (
    DimensionMismatch,
    EmptyData,
    MixedServeNumbers,
    ParseError,
    UnknownEnumValue,
    VersionMismatch,
)
from stylealloc.model import GaussianComponent
from stylealloc.sampler import GridSpec
from stylealloc.selection import ElpdReport, GridResult


def make_row(**overrides):
    row = {
        "match_id": "m1",
        "receiver": "alice",
        "server": "bob",
        "serve_number": 1,
        "court_side": "deuce",
        "serve_direction": "wide",
        "surface": "hard",
        "lateral": -1.25,
        "depth": 2.5,
        "date": "2024-01-15",
    }
    row.update(overrides)
    return row


def write_rows(path, rows):
    write_records_csv(path, rows)
    return path


class TestLoadCsv:
    def test_round_trip_preserves_values(self, tmp_path):
        rows = [
            make_row(lateral=-1.0625, depth=3.141592653589793),
            make_row(receiver="carol", court_side="ad", serve_direction="t"),
        ]
        path = write_rows(tmp_path / "pts.csv", rows)
        records = load_csv(path)
        assert len(records) == 2
        assert records[0].lateral == -1.0625
        assert records[0].depth == 3.141592653589793
        assert records[1].receiver == "carol"
        assert records[1].court_side == "ad"
        assert records[1].serve_direction == "t"

    def test_missing_direction_becomes_none(self, tmp_path):
        path = write_rows(tmp_path / "pts.csv", [make_row(serve_direction="")])
        records = load_csv(path)
        assert records[0].serve_direction is None

    def test_versionless_file_is_current_version(self, tmp_path):
        path = tmp_path / "pts.csv"
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(CSV_COLUMNS)
            writer.writerow([make_row()[c] for c in CSV_COLUMNS])
        assert len(load_csv(path)) == 1

    def test_foreign_version_rejected(self, tmp_path):
        path = tmp_path / "pts.csv"
        with open(path, "w", newline="") as handle:
            handle.write("#returns-csv-v99\n")
            csv.writer(handle).writerow(CSV_COLUMNS)
        with pytest.raises(VersionMismatch):
            load_csv(path)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "pts.csv"
        with open(path, "w", newline="") as handle:
            handle.write("a,b,c\n")
        with pytest.raises(ParseError):
            load_csv(path)

    def test_wrong_field_count_reports_row(self, tmp_path):
        path = tmp_path / "pts.csv"
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(CSV_COLUMNS)
            writer.writerow([make_row()[c] for c in CSV_COLUMNS])
            handle.write("too,few,fields\n")
        with pytest.raises(ParseError) as err:
            load_csv(path)
        assert err.value.row == 2

    @pytest.mark.parametrize(
        "overrides,column,kind",
        [
            ({"serve_number": "x"}, "serve_number", ParseError),
            ({"serve_number": 3}, "serve_number", UnknownEnumValue),
            ({"court_side": "middle"}, "court_side", UnknownEnumValue),
            ({"serve_direction": "slice"}, "serve_direction", UnknownEnumValue),
            ({"surface": "carpet"}, "surface", UnknownEnumValue),
            ({"lateral": "wide"}, "lateral", ParseError),
            ({"depth": "inf"}, "depth", ParseError),
            ({"date": "yesterday"}, "date", ParseError),
            ({"receiver": "  "}, "receiver", ParseError),
        ],
    )
    def test_bad_fields_report_row_and_column(self, tmp_path, overrides, column, kind):
        path = write_rows(
            tmp_path / "pts.csv", [make_row(), make_row(**overrides)]
        )
        with pytest.raises(kind) as err:
            load_csv(path)
        assert err.value.row == 2
        assert err.value.column == column


class TestApplyFilters:
    @staticmethod
    def rows(match_id, receiver, n):
        return [make_row(match_id=match_id, receiver=receiver) for _ in range(n)]

    def test_short_matches_dropped(self):
        records = [
            rec
            for m in ("a", "b", "c")
            for rec in self.rows(m, "alice", 30)
        ] + self.rows("d", "alice", 29)
        kept, report = apply_filters(load_rows(records))
        assert report.n_input == 119
        assert report.n_kept == 90
        assert report.matches_dropped == 1
        assert report.records_dropped_short_match == 29
        assert all(rec.match_id != "d" for rec in kept)

    def test_thin_receivers_dropped(self):
        records = [
            rec
            for m in ("a", "b", "c")
            for rec in self.rows(m, "alice", 30)
        ] + [
            rec
            for m in ("a", "b")
            for rec in self.rows(m, "carol", 30)
        ]
        kept, report = apply_filters(load_rows(records))
        assert report.receivers_dropped == 1
        assert all(rec.receiver != "carol" for rec in kept)

    def test_receiver_removal_can_sink_a_match(self):
        # Match "d" only clears 30 points with carol's help; carol plays
        # too few matches, and her removal must drag "d" down as well.
        records = (
            [rec for m in ("a", "b", "c") for rec in self.rows(m, "alice", 30)]
            + self.rows("d", "alice", 20)
            + self.rows("d", "carol", 10)
        )
        kept, report = apply_filters(load_rows(records))
        assert report.passes >= 2
        assert all(rec.match_id != "d" for rec in kept)
        assert report.n_kept == 90

    def test_filters_are_a_fixpoint(self):
        rng = np.random.default_rng(3)
        records = []
        for m in range(8):
            receiver = f"r{rng.integers(4)}"
            records.extend(self.rows(f"m{m}", receiver, int(rng.integers(5, 60))))
        kept, _ = apply_filters(load_rows(records))
        again, report = apply_filters(kept)
        assert again == kept
        assert report.n_input == report.n_kept
        assert report.passes == 1


def load_rows(rows_as_dicts_or_records):
    """Accept make_row() dicts and parse them through the real loader."""
    if rows_as_dicts_or_records and isinstance(rows_as_dicts_or_records[0], dict):
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "rows.csv")
            write_records_csv(path, rows_as_dicts_or_records)
            return load_csv(path)
    return rows_as_dicts_or_records


class TestEncodeCovariates:
    def test_standard_scheme_hand_case(self):
        records = load_rows(
            [
                make_row(),
                make_row(court_side="ad", serve_direction="t", surface="clay"),
                make_row(court_side="deuce", serve_direction="body", surface="grass"),
            ]
        )
        ds = encode_covariates(records)
        assert ds.covariate_names == STANDARD_COVARIATE_NAMES
        np.testing.assert_array_equal(
            ds.observations[0].covariates, [1, 0, 0, 0, 0, 0, 0, 0]
        )
        np.testing.assert_array_equal(
            ds.observations[1].covariates, [1, 0, 0, 0, 0, 1, 1, 0]
        )
        np.testing.assert_array_equal(
            ds.observations[2].covariates, [1, 1, 0, 0, 0, 0, 0, 1]
        )
        assert ds.observations[0].location.tolist() == [-1.25, 2.5]

    def test_rosters_sorted_and_ids_dense(self):
        records = load_rows(
            [
                make_row(receiver="zoe", server="yuri"),
                make_row(receiver="alice", server="bob"),
                make_row(receiver="zoe", server="bob"),
            ]
        )
        ds = encode_covariates(records)
        assert ds.receiver_names == ("alice", "zoe")
        assert ds.server_names == ("bob", "yuri")
        assert [obs.receiver_id for obs in ds.observations] == [1, 0, 1]
        assert [obs.server_id for obs in ds.observations] == [1, 0, 0]

    def test_missing_direction_dropped_and_counted(self):
        records = load_rows([make_row(), make_row(serve_direction="")])
        ds = encode_covariates(records)
        assert len(ds.observations) == 1
        assert ds.n_missing_direction == 1
        kept_all = encode_covariates(records, scheme="intercept-only")
        assert len(kept_all.observations) == 2
        assert kept_all.n_missing_direction == 0
        assert kept_all.covariate_names == ("intercept",)

    def test_mixed_serves_need_explicit_choice(self):
        records = load_rows([make_row(), make_row(serve_number=2)])
        with pytest.raises(MixedServeNumbers):
            encode_covariates(records)
        ds = encode_covariates(records, serve_number=2)
        assert ds.serve_number == 2
        assert len(ds.observations) == 1

    def test_empty_rejections(self):
        with pytest.raises(EmptyData):
            encode_covariates([])
        records = load_rows([make_row()])
        with pytest.raises(EmptyData):
            encode_covariates(records, serve_number=2)
        with pytest.raises(DimensionMismatch):
            encode_covariates(records, scheme="one-hot")


class TestModelFiles:
    def test_lsa_round_trip_is_exact(self, tmp_path):
        params = random_params(3, 4, 5, 3, 2, np.random.default_rng(0))
        path = tmp_path / "model.json"
        write_model_file(path, params, meta={"serve_number": "1"})
        loaded, meta = read_model_file(path)
        assert meta == {"serve_number": "1"}
        np.testing.assert_array_equal(loaded.betas.beta, params.betas.beta)
        np.testing.assert_array_equal(loaded.pi.pi, params.pi.pi)
        np.testing.assert_array_equal(loaded.eta, params.eta)
        np.testing.assert_array_equal(loaded.delta, params.delta)
        for a, b in zip(loaded.components, params.components):
            np.testing.assert_array_equal(a.alpha, b.alpha)
            np.testing.assert_array_equal(a.scale_vec, b.scale_vec)
            assert a.corr == b.corr
        assert loaded.alpha0 == params.alpha0
        assert loaded.prior_scales == params.prior_scales

    def test_baseline_round_trip(self, tmp_path):
        comp = GaussianComponent.from_scales(
            np.array([[0.5, -0.25], [1.5, 0.75]]), (0.6, 0.7), 0.2
        )
        params = BaselineParams(
            tag="mixed-membership",
            components=(comp,),
            weights=np.array([[1.0], [1.0]]),
            eta=np.zeros((2, 2, 2)),
            delta=np.zeros((1, 2, 2)),
        )
        path = tmp_path / "baseline.json"
        write_model_file(path, params)
        loaded, _ = read_model_file(path)
        assert isinstance(loaded, BaselineParams)
        assert loaded.tag == "mixed-membership"
        np.testing.assert_array_equal(loaded.weights, params.weights)

    def test_foreign_version_rejected(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text('{"format": "stylealloc-model-v9"}')
        with pytest.raises(VersionMismatch):
            read_model_file(path)

    def test_failed_write_leaves_no_partial_file(self, tmp_path):
        path = tmp_path / "model.json"
        with pytest.raises(DimensionMismatch):
            write_model_file(path, object())
        assert not path.exists()
        assert os.listdir(tmp_path) == []


class TestDensityGridFiles:
    def test_round_trip_is_exact(self, tmp_path):
        grid = GridSpec(-5.0, 5.0, -1.0, 7.0, nx=12, ny=9)
        rng = np.random.default_rng(1)
        values = rng.uniform(size=(9, 12))
        path = tmp_path / "grid.csv"
        write_density_grid(path, values, grid, meta={"receiver": "alice"})
        loaded, box, meta = read_density_grid(path)
        np.testing.assert_array_equal(loaded, values)
        assert box == (-5.0, 5.0, -1.0, 7.0, 12, 9)
        assert meta == {"receiver": "alice"}

    def test_shape_mismatch_rejected(self, tmp_path):
        grid = GridSpec(-1.0, 1.0, -1.0, 1.0, nx=4, ny=3)
        with pytest.raises(DimensionMismatch):
            write_density_grid(tmp_path / "g.csv", np.zeros((4, 3)), grid)

    def test_truncated_file_rejected(self, tmp_path):
        grid = GridSpec(-1.0, 1.0, -1.0, 1.0, nx=4, ny=3)
        path = tmp_path / "g.csv"
        write_density_grid(path, np.zeros((3, 4)), grid)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-2]) + "\n")
        with pytest.raises(ParseError):
            read_density_grid(path)

    def test_missing_box_rejected(self, tmp_path):
        path = tmp_path / "g.csv"
        path.write_text("#stylealloc-grid-v1\nx,y,density\n")
        with pytest.raises(ParseError):
            read_density_grid(path)

    def test_foreign_version_rejected(self, tmp_path):
        path = tmp_path / "g.csv"
        path.write_text("#stylealloc-grid-v2\n")
        with pytest.raises(VersionMismatch):
            read_density_grid(path)


class TestSummaryFiles:
    def test_elpd_table(self, tmp_path):
        reports = [
            ElpdReport("mvn", -120.5, 3.25, np.zeros(3), np.zeros(3, dtype=int), 5),
            ElpdReport("lsa(K=2,M=2)", -110.0, 3.0, np.zeros(3), np.zeros(3, dtype=int), 5),
        ]
        path = tmp_path / "elpd.csv"
        write_elpd_csv(path, reports)
        with open(path, newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["model", "elpd", "se"]
        assert rows[1] == ["mvn", "-120.5", "3.25"]
        assert rows[2][0] == "lsa(K=2,M=2)"

    def test_grid_table_flags_best(self, tmp_path):
        entries = {
            (2, 2): ElpdReport("lsa(K=2,M=2)", -105.0, 2.0, np.zeros(2), np.zeros(2, dtype=int), 4),
            (2, 3): ElpdReport("lsa(K=2,M=3)", -101.0, 2.0, np.zeros(2), np.zeros(2, dtype=int), 4),
        }
        result = GridResult(entries=entries, best=(2, 3))
        path = tmp_path / "grid.csv"
        write_grid_csv(path, result)
        with open(path, newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["n_styles", "n_patterns", "elpd", "se", "best"]
        flagged = {tuple(r[:2]): r[4] for r in rows[1:]}
        assert flagged == {("2", "2"): "0", ("2", "3"): "1"}

    def test_style_table_shapes(self, tmp_path):
        params = separated_truth(4, 2)
        path = tmp_path / "styles.csv"
        write_style_csv(path, params, receiver_names=["a", "b", "c", "d"])
        with open(path, newline="") as handle:
            rows = list(csv.reader(handle))
        assert len(rows) == 1 + 3 + 4
        style_rows = [r for r in rows[1:] if r[0] == "style"]
        receiver_rows = [r for r in rows[1:] if r[0] == "receiver"]
        assert len(style_rows) == 3 and len(receiver_rows) == 4
        weights = [float(v) for v in style_rows[0][2 + 3 :]]
        assert sum(weights) == pytest.approx(1.0, abs=1e-12)
        assert receiver_rows[0][1] == "a"
