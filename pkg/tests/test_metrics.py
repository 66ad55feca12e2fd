import datetime as dt
from fractions import Fraction

import pandas as pd
import pytest

from capitation.domain import (
    CostItem,
    CostKind,
    FacilityKind,
    FacilityRecord,
    MemberRecord,
    MemberStatus,
    Period,
    Scheme,
    VisitRecord,
)
from capitation.ingest import DatasetBundle
from capitation.metrics import (
    MissingCatchment,
    ZeroActivity,
    active_members,
    annualize,
    compute_metrics,
    visit_net_cost,
    visit_cost_table,
)
from conftest import random_bundle
from oracles import naive_metrics, naive_visit_net

Y2023 = Period.parse("2023")


def visit(items, copay, vid="V1"):
    return VisitRecord(vid, "H1", "M1", dt.date(2023, 3, 1), cost_items=tuple(items), recorded_copay_total=copay)


def svc(c, **kw):
    return CostItem(CostKind.SERVICE, "S", 1, c, **kw)


class TestVisitNetCost:
    def test_ambulance_min_rule(self):
        v = visit([svc(200000), CostItem(CostKind.DRUG, "D", 1, 100000),
                   CostItem(CostKind.AMBULANCE, "A", 1, 1000000)], 150000)
        s = visit_net_cost(v)
        assert s.phc_cost_gross == 300000
        assert s.ambulance_cost == 1000000
        assert s.phc_cost_net == 250000

    def test_plain_copay(self):
        assert visit_net_cost(visit([svc(120000)], 20000)).phc_cost_net == 100000

    def test_negative_clamped_with_finding(self):
        s = visit_net_cost(visit([svc(1000)], 5000))
        assert s.phc_cost_net == 0
        assert s.findings[0].code == "NegativeNetCost"

    def test_non_phc_flag(self):
        assert visit_net_cost(visit([svc(1000, is_non_phc=True)], 0)).contains_non_phc

    def test_vectorised_matches_scalar(self):
        b = random_bundle(3, n_visits=400)
        table = visit_cost_table(b)
        for v in b.visit_records():
            net, non_phc = naive_visit_net(v)
            assert table.loc[v.visit_id, "net"] == net
            assert table.loc[v.visit_id, "non_phc"] == non_phc


class TestActiveMembers:
    def members(self, *rows):
        return DatasetBundle.from_records([], [MemberRecord(f"M{i}", "H", "C1", s, d, sc)
                                              for i, (s, d, sc) in enumerate(rows)], []).members

    def test_rules(self):
        m = self.members(
            (MemberStatus.ACTIVE, dt.date(2021, 3, 3), Scheme.CBHI),
            (MemberStatus.PENDING, dt.date(2024, 7, 1), Scheme.CBHI),
            (MemberStatus.INACTIVE, dt.date(2023, 1, 1), Scheme.CBHI),
            (MemberStatus.PENDING, dt.date(2023, 3, 1), Scheme.CBHI),
            (MemberStatus.ACTIVE, dt.date(2023, 1, 1), Scheme.OTHER),
        )
        assert active_members(m, Period.parse("FY2024")).member_id.tolist() == ["M0", "M1"]


class TestAnnualize:
    def test_half_year(self):
        assert annualize(6_000_000, 6) == 12_000_000

    def test_identity(self):
        assert annualize(12345, 12) == 12345

    def test_zero(self):
        with pytest.raises(ZeroActivity):
            annualize(1, 0)


def one_hc_bundle():
    facs = [FacilityRecord("H1", FacilityKind.HEALTH_CENTER, catchment_id="C1", district_id="D", province_id="P"),
            FacilityRecord("H2", FacilityKind.HEALTH_CENTER, catchment_id="C2", district_id="D", province_id="P"),
            FacilityRecord("X1", FacilityKind.PRIVATE_HEALTH_POST, district_id="D", province_id="P")]
    mems = [MemberRecord(f"A{i}", "h", "C1", MemberStatus.ACTIVE, dt.date(2023, 1, 1)) for i in range(10)]
    mems += [MemberRecord(f"B{i}", "h", "C2", MemberStatus.ACTIVE, dt.date(2023, 1, 1)) for i in range(3)]
    visits = []
    # 4 own visits and 6 elsewhere (H2 and a private post), spread over 12 months
    places = ["H1"] * 4 + ["H2"] * 3 + ["X1"] * 3
    for i, f in enumerate(places):
        visits.append(VisitRecord(f"V{i:02d}", f, f"A{i}", dt.date(2023, i + 1, 5)))
    for i in range(3):
        visits.append(VisitRecord(f"W{i}", "H1", f"B{i}", dt.date(2023, 10 + i, 5)))
    return DatasetBundle.from_records(facs, mems, visits)


class TestComputeMetrics:
    def test_counting_example(self):
        m = compute_metrics(one_hc_bundle(), Y2023).by_id()["H1"]
        # H1 is active in months 1-4 and 10-12
        assert m.months_active == 7
        assert m.member_count == 10
        assert m.own_visits == 4 and m.member_visits == 10 and m.inflow_visits == 3
        assert m.capture_ratio == pytest.approx(0.4)
        assert m.phc_utilization_rate == pytest.approx(10 * 12 / 7 / 10)
        assert m.inflow == pytest.approx(3 * 12 / 7)

    def test_zero_member_visits(self):
        facs = [FacilityRecord("H1", FacilityKind.HEALTH_CENTER, catchment_id="C1"),
                FacilityRecord("H2", FacilityKind.HEALTH_CENTER, catchment_id="C2")]
        mems = [MemberRecord("M1", "h", "C2", MemberStatus.ACTIVE, dt.date(2023, 1, 1))]
        b = DatasetBundle.from_records(facs, mems, [VisitRecord("V1", "H1", "M1", dt.date(2023, 5, 1))])
        res = compute_metrics(b, Y2023)
        assert res.by_id()["H1"].capture_ratio == 0
        assert any(f.code == "ZeroDenominator" and f.key == "H1" for f in res.findings)

    def test_missing_catchment(self):
        b = DatasetBundle.from_records([FacilityRecord("H1", FacilityKind.HEALTH_CENTER)], [], [])
        with pytest.raises(MissingCatchment):
            compute_metrics(b, Y2023)

    def test_conservation(self, small_generated):
        b, _ = small_generated
        res = compute_metrics(b, Y2023)
        from capitation.metrics import period_visits
        v = period_visits(b, Y2023)
        assert sum(m.own_visits + m.inflow_visits for m in res) == int(v.hc.notna().sum())

    def test_u_not_above_phc_rate(self, small_generated):
        res = compute_metrics(small_generated[0], Y2023)
        assert all(m.hc_utilization_rate <= m.phc_utilization_rate + 1e-12 for m in res)
        assert all(0 <= m.capture_ratio <= 1 for m in res)

    def test_non_phc_exclusion_only_decreases_cost(self, small_generated):
        b, _ = small_generated
        with_all = compute_metrics(b.replace(code_map=b.code_map.assign(is_non_phc=False)), Y2023).by_id()
        res = compute_metrics(b, Y2023)
        assert all(m.cost_cents <= with_all[m.facility_id].cost_cents for m in res)

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force_random(self, seed):
        b = random_bundle(100 + seed)
        expected = naive_metrics(b, Y2023.start, Y2023.end)
        got = compute_metrics(b, Y2023).by_id()
        assert set(got) == set(expected)
        for fid, e in expected.items():
            m = got[fid]
            assert (m.months_active, m.member_count, m.own_visits, m.inflow_visits, m.member_visits,
                    m.cost_cents, m.annualized_cost_cents) == (
                e["months_active"], e["M"], e["own"], e["inflow_visits"], e["member_visits"],
                e["cost_cents"], e["annualized_cost_cents"])
            assert m.capture_ratio == pytest.approx(float(e["capture"]), rel=1e-12)
            assert m.phc_utilization_rate == pytest.approx(float(e["phc_rate"]), rel=1e-12)

    def test_ambulance_rate_is_configurable(self):
        b = random_bundle(7)
        a = compute_metrics(b, Y2023, 0.10).by_id()
        e = naive_metrics(b, Y2023.start, Y2023.end, Fraction(1, 4))
        c = compute_metrics(b, Y2023, 0.25).by_id()
        assert all(c[k].cost_cents == e[k]["cost_cents"] for k in e)
        assert any(a[k].cost_cents != c[k].cost_cents for k in e)

    def test_report_frame_columns(self, small_generated):
        df = compute_metrics(small_generated[0], Y2023).report_frame()
        assert list(df.columns) == ["facility_id", "period", "annualized_cost", "months_active", "M",
                                    "phc_utilization_rate", "u", "capture_ratio", "inflow"]
        assert pd.api.types.is_integer_dtype(df.annualized_cost)
