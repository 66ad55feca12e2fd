import datetime as dt
import math
from fractions import Fraction

import numpy as np
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
    VisitRecord,
)
from capitation.ingest import DatasetBundle
from capitation.monitoring import (
    FlagType,
    InsufficientReference,
    SubPeriodCost,
    bhattacharyya_distance,
    bhattacharyya_flags,
    compute_indicators,
    decompose_ffs_gap,
    fences,
    flags_frame,
    iqr_flags,
    quartiles,
)
from oracles import hand_quartiles, overlap_distance


def series(rows):
    return pd.DataFrame(rows, columns=["facility_id", "district_id", "province_id", "month", "indicator", "value"])


def history(values, fid="H1"):
    return series([(fid, "D1", "P1", 600 + k, "ReferralRatio", v) for k, v in enumerate(values)])


class TestQuartiles:
    def test_hand_example(self):
        assert quartiles(range(1, 10)) == (3, 5, 7)
        assert fences(range(1, 10)) == (3, 7, -3, 13)

    @pytest.mark.parametrize("n", [4, 5, 6, 7, 10, 11, 33])
    def test_against_hand_oracle(self, n):
        x = np.random.default_rng(n).normal(size=n).tolist()
        assert quartiles(x) == pytest.approx(hand_quartiles(x))

    def test_shift_invariance(self):
        x = np.random.default_rng(1).normal(size=21)
        a = np.array(fences(x))
        b = np.array(fences(x + 50))
        assert np.allclose(b, a + 50)


class TestIqrFlags:
    def test_outlier_flagged(self):
        flags, _ = iqr_flags(history(list(range(1, 10)) + [100]), FlagType.SELF_HISTORY, month=609)
        (f,) = flags
        assert f.statistic == 100 and f.reference["upper"] == 13 and f.reference["lower"] == -3

    def test_only_outlier_in_pooled_fixture(self):
        rows = series([(f"H{k}", "D1", "P1", 600, "ReferralRatio", v) for k, v in enumerate(list(range(1, 10)) + [100])])
        flags, _ = iqr_flags(rows, FlagType.DISTRICT_MONTH)
        assert [f.facility_id for f in flags] == ["H9"]

    def test_median_not_flagged(self):
        flags, _ = iqr_flags(history(list(range(1, 10)) + [5]), FlagType.SELF_HISTORY, month=609)
        assert flags == []

    def test_insufficient_reference(self):
        flags, findings = iqr_flags(history([1, 2, 3, 50]), FlagType.SELF_HISTORY, month=603)
        assert flags == [] and findings[0].code == "InsufficientReference"

    def test_shift_invariant_flags(self):
        v = np.random.default_rng(0).normal(size=30)
        v[20] = 9
        a, _ = iqr_flags(history(v), FlagType.SELF_HISTORY)
        b, _ = iqr_flags(history(v + 7), FlagType.SELF_HISTORY)
        assert [f.month for f in a] == [f.month for f in b] and a

    def test_flags_frame_columns(self):
        flags, _ = iqr_flags(history(list(range(1, 10)) + [100]), FlagType.SELF_HISTORY, month=609)
        df = flags_frame(flags)
        assert list(df.columns) == ["facility_id", "indicator", "flag_type", "month", "value", "reference_summary"]
        assert df.month.iloc[0] == "2020-10"


class TestBhattacharyya:
    def test_identical(self):
        x = np.random.default_rng(0).normal(size=200)
        assert bhattacharyya_distance(x, x) == 0

    def test_disjoint(self):
        assert bhattacharyya_distance([0, 1, 2], [10, 11, 12]) == pytest.approx(-math.log(1e-12))

    def test_degenerate(self):
        assert bhattacharyya_distance([3, 3], [3, 3, 3]) == 0

    def test_three_sd_shift(self):
        rng = np.random.default_rng(4)
        prov = rng.normal(size=400)
        fac = prov + 3 * prov.std()
        d = bhattacharyya_distance(fac, prov)
        assert d == pytest.approx(overlap_distance(fac, prov), abs=1e-9)
        assert d > 0.223

    def test_symmetric_and_affine_invariant(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=100), rng.normal(0.5, 2, size=80)
        assert bhattacharyya_distance(a, b) == pytest.approx(bhattacharyya_distance(b, a))
        assert bhattacharyya_distance(a, b) == pytest.approx(bhattacharyya_distance(3 * a + 1, 3 * b + 1))

    def test_flags_against_province(self):
        rng = np.random.default_rng(6)
        rows = []
        for k in range(6):
            shift = 5.0 if k == 0 else 0.0
            rows += [(f"H{k}", "D1", "P1", 600 + m, "DrugsPerVisit", shift + rng.normal()) for m in range(24)]
        flags, _ = bhattacharyya_flags(series(rows))
        assert "H0" in {f.facility_id for f in flags}
        assert all(f.flag_type is FlagType.PROVINCE_DISTRIBUTION and f.month is None for f in flags)

    def test_degenerate_finding(self):
        rows = [(f"H{k}", "D1", "P1", 600 + m, "DrugsPerVisit", 1.0) for k in range(2) for m in range(5)]
        flags, findings = bhattacharyya_flags(series(rows))
        assert flags == [] and {f.code for f in findings} == {"DegenerateRange"}


def indicator_bundle():
    facs = [FacilityRecord("H1", FacilityKind.HEALTH_CENTER, catchment_id="C1", district_id="D", province_id="P")]
    mems = [MemberRecord(f"M{i}", "h", "C1", MemberStatus.ACTIVE, dt.date(2024, 1, 1)) for i in range(20)]
    lab = CostItem(CostKind.SERVICE, "LAB", 2, 100, is_lab_test=True)
    abx = CostItem(CostKind.DRUG, "AMX", 1, 100, is_antibiotic=True)
    drug = CostItem(CostKind.DRUG, "PCM", 1, 100)
    visits = []
    for i in range(10):
        items = (lab, abx, drug) if i < 3 else (drug,)
        visits.append(VisitRecord(f"V{i}", "H1", f"M{i}", dt.date(2024, 3, 1 + i), referred=i < 2,
                                  admitted=i == 0, admission_date=dt.date(2024, 3, 1) if i == 0 else None,
                                  discharge_date=dt.date(2024, 3, 4) if i == 0 else None, cost_items=items))
    visits.append(VisitRecord("W0", "H1", "M0", dt.date(2024, 4, 2)))
    return DatasetBundle.from_records(facs, mems, visits)


class TestIndicators:
    def test_values(self):
        ind = compute_indicators(indicator_bundle(), Period.parse("2024"))
        march = ind.loc[ind.month == Period.parse("2024").start + 2].set_index("indicator").value
        assert march["ReferralRatio"] == 0.2
        assert march["AdmissionRatio"] == 0.1
        assert march["AvgLengthOfStay"] == 3
        assert march["TestsPerVisit"] == pytest.approx(0.6)
        assert march["DrugsPerVisit"] == pytest.approx(1.3)
        assert march["AntibioticVisitShare"] == pytest.approx(0.3)
        assert march["CatchmentUtilization"] == pytest.approx(0.5)

    def test_absent_alos(self):
        ind = compute_indicators(indicator_bundle(), Period.parse("2024"))
        april = ind.loc[ind.month == Period.parse("2024").start + 3]
        assert "AvgLengthOfStay" not in set(april.indicator)
        assert (ind.value >= 0).all()

    def test_ratios_bounded_on_generated(self, small_generated):
        ind = compute_indicators(small_generated[0], Period.parse("2023"))
        ratios = ind.loc[ind.indicator.isin(["ReferralRatio", "AdmissionRatio", "AntibioticVisitShare"])]
        assert ratios.value.between(0, 1).all()
        assert set(ind.indicator) >= {"ReferralRatio", "DrugsPerVisit", "CatchmentUtilization"}


REF = [SubPeriodCost(100, 1_000_000)] * 4


class TestFfsGap:
    def test_unchanged(self):
        d = decompose_ffs_gap(12_000, REF, SubPeriodCost(100, 1_000_000))
        assert d.utilization_component == 0 and d.cost_per_visit_component == 0
        assert d.total_gap == 12_000 - 10_000 == d.capitation - d.ffs_reference

    def test_visits_up_cost_same(self):
        d = decompose_ffs_gap(12_000, REF, SubPeriodCost(110, 1_100_000))
        assert d.cost_per_visit_component == 0
        assert d.utilization_component == 1_000
        assert d.total_gap - (12_000 - 10_000) == -d.utilization_component

    @pytest.mark.parametrize("seed", range(5))
    def test_identity_exact(self, seed):
        rng = np.random.default_rng(seed)
        ref = [SubPeriodCost(int(rng.integers(50, 200)), int(rng.integers(10**5, 10**7))) for _ in range(6)]
        cur = SubPeriodCost(int(rng.integers(50, 200)), int(rng.integers(10**5, 10**7)))
        cap = Fraction(int(rng.integers(10**3, 10**5)), 3)
        d = decompose_ffs_gap(cap, ref, cur)
        # independent arithmetic
        v_ref = Fraction(sum(r.visits for r in ref), len(ref))
        c_ref = Fraction(sum(r.cost_cents for r in ref), 100 * sum(r.visits for r in ref))
        c_now = Fraction(cur.cost_cents, 100 * cur.visits)
        assert d.utilization_component == (cur.visits - v_ref) * c_ref
        assert d.cost_per_visit_component == cur.visits * (c_now - c_ref)
        assert d.utilization_component + d.cost_per_visit_component + d.residual == d.total_gap
        assert d.total_gap == cap - Fraction(cur.cost_cents, 100)

    def test_band(self):
        ref = [SubPeriodCost(100, c) for c in (900_000, 1_000_000, 1_100_000, 1_200_000, 1_300_000)]
        # totals 9000..13000 RWF: hinges 10000 and 12000
        d = decompose_ffs_gap(10_000, ref, SubPeriodCost(100, 1_000_000))
        assert d.expected_variability_band == (10_000 - 3_000, 10_000 + 3_000)
        assert d.within_band
        assert not decompose_ffs_gap(10_000, ref, SubPeriodCost(100, 1_400_000)).within_band

    def test_insufficient(self):
        with pytest.raises(InsufficientReference):
            decompose_ffs_gap(1, REF[:3], REF[0])
