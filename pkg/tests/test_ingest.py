import datetime as dt

import pytest

from capitation.config import Config
from capitation.domain import CostItem, CostKind, FacilityKind, FacilityRecord, MemberRecord, MemberStatus, VisitRecord
from capitation.ingest import (
    DatasetBundle,
    IoError,
    MalformedHeader,
    MissingFile,
    RowParseError,
    load_bundle,
    write_bundle,
)
from conftest import random_bundle

FILES = ["facilities.csv", "members.csv", "visits.csv", "cost_items.csv", "code_map.csv"]


def three_visit_bundle():
    facs = [FacilityRecord("H1", FacilityKind.HEALTH_CENTER, catchment_id="C1", district_id="D1", province_id="P1")]
    mems = [MemberRecord("M1", "HH1", "C1", MemberStatus.ACTIVE, dt.date(2023, 1, 1))]
    visits = [VisitRecord(f"V{i}", "H1", "M1", dt.date(2023, 2, i + 1),
                          cost_items=(CostItem(CostKind.SERVICE, "CONS", 1, 150050),),
                          recorded_copay_total=20000) for i in range(3)]
    return DatasetBundle.from_records(facs, mems, visits)


class TestLoad:
    def test_three_row_fixture(self, tmp_path):
        write_bundle(three_visit_bundle(), tmp_path)
        b = load_bundle(tmp_path)
        assert len(b.visits) == 3
        assert b.source_manifest["files"]["visits.csv"]["rows"] == 3
        assert b.cost_items.unit_cost.tolist() == [150050] * 3

    def test_money_parsed_exactly(self, tmp_path):
        write_bundle(three_visit_bundle(), tmp_path)
        assert "1500.50" in (tmp_path / "cost_items.csv").read_text()

    def test_dangling_cost_item_quarantined(self, tmp_path):
        write_bundle(three_visit_bundle(), tmp_path)
        with open(tmp_path / "cost_items.csv", "a") as fh:
            fh.write("V999,Service,CONS,1,10.00\n")
        b = load_bundle(tmp_path, Config(quarantine_fraction=0.5))
        assert len(b.cost_items) == 3
        (f,) = b.quarantine
        assert f.code == "DanglingVisitKey" and f.line == 5

    def test_bad_row_reports_line(self, tmp_path):
        write_bundle(three_visit_bundle(), tmp_path)
        text = (tmp_path / "visits.csv").read_text().splitlines()
        text[2] = text[2].replace("2023-02-02", "2023-02-31")
        (tmp_path / "visits.csv").write_text("\n".join(text) + "\n")
        b = load_bundle(tmp_path, Config(quarantine_fraction=0.5))
        assert len(b.visits) == 2
        assert any(f.line == 3 and f.code == "RowParseError" for f in b.quarantine)

    def test_quarantine_over_threshold_is_fatal(self, tmp_path):
        write_bundle(three_visit_bundle(), tmp_path)
        with open(tmp_path / "cost_items.csv", "a") as fh:
            fh.write("V999,Service,CONS,1,10.00\n")
        with pytest.raises(RowParseError):
            load_bundle(tmp_path)

    def test_missing_file(self, tmp_path):
        write_bundle(three_visit_bundle(), tmp_path)
        (tmp_path / "members.csv").unlink()
        with pytest.raises(MissingFile, match="members.csv"):
            load_bundle(tmp_path)

    def test_malformed_header(self, tmp_path):
        write_bundle(three_visit_bundle(), tmp_path)
        (tmp_path / "code_map.csv").write_text("code,flag\n")
        with pytest.raises(MalformedHeader):
            load_bundle(tmp_path)

    def test_manifest_hash_stable(self, tmp_path):
        write_bundle(three_visit_bundle(), tmp_path)
        a = load_bundle(tmp_path).source_manifest
        b = load_bundle(tmp_path).source_manifest
        assert a == b


class TestWrite:
    def test_empty_bundle_writes_headers(self, tmp_path):
        write_bundle(DatasetBundle.empty(), tmp_path)
        for name in FILES:
            assert len((tmp_path / name).read_text().splitlines()) == 1

    def test_unwritable_target(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(IoError):
            write_bundle(three_visit_bundle(), blocker / "sub")

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_round_trip_random(self, tmp_path, seed):
        b = random_bundle(seed, n_visits=300)
        write_bundle(b, tmp_path)
        assert load_bundle(tmp_path, Config(quarantine_fraction=0.05)).equals(b)

    def test_round_trip_generated(self, tmp_path, small_generated):
        b, _ = small_generated
        write_bundle(b, tmp_path)
        assert load_bundle(tmp_path).equals(b)

    def test_write_is_byte_stable(self, tmp_path, small_generated):
        b, _ = small_generated
        m1 = write_bundle(b, tmp_path / "a")
        m2 = write_bundle(load_bundle(tmp_path / "a"), tmp_path / "b")
        assert m1 == m2
