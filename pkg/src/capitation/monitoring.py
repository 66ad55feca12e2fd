"""Facility indicators, outlier flags and capitation-vs-FFS gap decomposition.

Quartiles are Tukey hinges: the median of each half of the sorted values,
with the overall median included in both halves when the count is odd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

from .domain import CapitationError, CostKind, Finding, Period, format_month, months_of_dates
from .ingest import DatasetBundle
from .metrics import active_member_counts, compute_metrics, period_visits

DEFAULT_THRESHOLD = 0.223
BC_FLOOR = 1e-12


class Indicator(str, Enum):
    REFERRAL_RATIO = "ReferralRatio"
    ADMISSION_RATIO = "AdmissionRatio"
    AVG_LENGTH_OF_STAY = "AvgLengthOfStay"
    CATCHMENT_UTILIZATION = "CatchmentUtilization"
    TESTS_PER_VISIT = "TestsPerVisit"
    DRUGS_PER_VISIT = "DrugsPerVisit"
    ANTIBIOTIC_VISIT_SHARE = "AntibioticVisitShare"


class FlagType(str, Enum):
    SELF_HISTORY = "SelfHistory"
    DISTRICT_MONTH = "DistrictMonth"
    PROVINCE_DISTRIBUTION = "ProvinceDistribution"


class InsufficientReference(CapitationError):
    pass


class MonthRange(NamedTuple):
    start: int
    end: int


INDICATOR_COLUMNS = ["facility_id", "district_id", "province_id", "month", "indicator", "value"]


def compute_indicators(bundle: DatasetBundle, months) -> pd.DataFrame:
    """Long table of the seven indicators per Health Center and month.

    ``months`` is a :class:`Period` or any object with ``start``/``end``
    month indices. Undefined values (zero denominators) are left out.
    """
    rng = MonthRange(months.start, months.end)
    v = period_visits(bundle, rng)
    v = v.loc[v.hc.notna()]
    vis = bundle.visits.set_index("visit_id")
    v = v.join(vis[["referred", "admitted", "admission_date", "discharge_date"]], on="visit_id")

    items = bundle.items
    items = items.loc[items.visit_id.isin(set(v.visit_id))]
    drugs = items.loc[items.kind == CostKind.DRUG.value].groupby("visit_id").size()
    tests = items.loc[items.is_lab_test].groupby("visit_id").quantity.sum()
    abx = set(items.visit_id[items.is_antibiotic & (items.kind == CostKind.DRUG.value)])
    v["drugs"] = v.visit_id.map(drugs).fillna(0).to_numpy()
    v["tests"] = v.visit_id.map(tests).fillna(0).to_numpy()
    v["abx"] = v.visit_id.isin(abx).to_numpy()
    stay_ok = v.admitted & v.admission_date.notna() & v.discharge_date.notna()
    v["stay"] = np.where(stay_ok, (v.discharge_date - v.admission_date).dt.days, np.nan)

    g = v.groupby(["hc", "month"])
    agg = g.agg(attended=("visit_id", "size"), referred=("referred", "sum"), admitted=("admitted", "sum"),
                drugs=("drugs", "sum"), tests=("tests", "sum"), abx=("abx", "sum"), alos=("stay", "mean"))
    agg = agg.reset_index()

    fac = bundle.facilities.set_index("facility_id")
    agg["catchment_id"] = agg.hc.map(fac.catchment_id)
    member_visits = v.groupby(["member_catchment", "month"]).size()
    mv = member_visits.reindex(pd.MultiIndex.from_arrays([agg.catchment_id, agg.month])).to_numpy()
    members = np.zeros(len(agg))
    for year_start in sorted(set((agg.month // 12 * 12).tolist())):
        counts = active_member_counts(bundle.members, Period.parse(str(year_start // 12 + 1970)))
        sel = (agg.month // 12 * 12 == year_start).to_numpy()
        members[sel] = agg.catchment_id[sel].map(counts).fillna(0).to_numpy()

    att = agg.attended.to_numpy(dtype=float)
    values = {
        Indicator.REFERRAL_RATIO: agg.referred / att,
        Indicator.ADMISSION_RATIO: agg.admitted / att,
        Indicator.AVG_LENGTH_OF_STAY: agg.alos,
        Indicator.CATCHMENT_UTILIZATION: pd.Series(np.where(members > 0, np.nan_to_num(mv) / np.where(
            members > 0, members, 1), np.nan)),
        Indicator.TESTS_PER_VISIT: agg.tests / att,
        Indicator.DRUGS_PER_VISIT: agg.drugs / att,
        Indicator.ANTIBIOTIC_VISIT_SHARE: agg.abx / att,
    }
    frames = []
    for ind, val in values.items():
        frames.append(pd.DataFrame({
            "facility_id": agg.hc.to_numpy(), "district_id": agg.hc.map(fac.district_id).to_numpy(),
            "province_id": agg.hc.map(fac.province_id).to_numpy(), "month": agg.month.to_numpy(),
            "indicator": ind.value, "value": np.asarray(val, dtype=float)}))
    out = pd.concat(frames, ignore_index=True)
    out = out.loc[np.isfinite(out.value)]
    return out.sort_values(["facility_id", "month", "indicator"], kind="stable").reset_index(drop=True)


def indicators_report(ind: pd.DataFrame) -> pd.DataFrame:
    out = ind[["facility_id", "month", "indicator", "value"]].copy()
    out["month"] = [format_month(m) for m in out.month]
    return out


# ---------------------------------------------------------------------------
# IQR flags
# ---------------------------------------------------------------------------


def _median_sorted(x: np.ndarray) -> float:
    n = len(x)
    mid = n // 2
    return float(x[mid]) if n % 2 else (float(x[mid - 1]) + float(x[mid])) / 2


def quartiles(values) -> tuple[float, float, float]:
    """(Q1, median, Q3) as Tukey hinges."""
    x = np.sort(np.asarray(values, dtype=float))
    n = len(x)
    if n == 0:
        raise ValueError("quartiles of an empty sample")
    half = (n + 1) // 2
    return _median_sorted(x[:half]), _median_sorted(x), _median_sorted(x[n - half:])


def fences(values, multiplier: float = 1.5) -> tuple[float, float, float, float]:
    """(Q1, Q3, lower fence, upper fence)."""
    q1, _, q3 = quartiles(values)
    iqr = q3 - q1
    return q1, q3, q1 - multiplier * iqr, q3 + multiplier * iqr


@dataclass(frozen=True)
class MonitorFlag:
    facility_id: str
    indicator: str
    month: Optional[int]
    flag_type: FlagType
    statistic: float
    reference: dict = field(default_factory=dict, compare=False)

    @property
    def reference_summary(self) -> str:
        return ";".join(f"{k}={v:.6g}" for k, v in self.reference.items())


def _check(value, ref, multiplier):
    q1, q3, lo, hi = fences(ref, multiplier)
    return (value < lo or value > hi), {"q1": q1, "q3": q3, "lower": lo, "upper": hi}


def iqr_flags(series: pd.DataFrame, scope: FlagType, month: Optional[int] = None, multiplier: float = 1.5,
              min_reference: int = 4):
    """IQR outlier flags; returns (flags, findings).

    ``SelfHistory`` compares a facility-month to the same facility's earlier
    months; ``DistrictMonth`` compares it to every facility of its district
    in that month (itself included). ``month`` restricts the evaluated month.
    """
    scope = FlagType(scope)
    flags, findings = [], []
    s = series.sort_values(["indicator", "facility_id", "month"], kind="stable")
    if scope is FlagType.SELF_HISTORY:
        for (ind, fid), grp in s.groupby(["indicator", "facility_id"], sort=True):
            months = grp.month.to_numpy()
            vals = grp.value.to_numpy()
            for k in range(len(grp)):
                if month is not None and months[k] != month:
                    continue
                ref = vals[months < months[k]]
                if len(ref) < min_reference:
                    findings.append(Finding("InsufficientReference", "facility", fid,
                                            f"{ind} {format_month(months[k])}: {len(ref)} reference points"))
                    continue
                hit, info = _check(vals[k], ref, multiplier)
                if hit:
                    flags.append(MonitorFlag(fid, ind, int(months[k]), scope, float(vals[k]), info))
    elif scope is FlagType.DISTRICT_MONTH:
        targets = s if month is None else s.loc[s.month == month]
        for (ind, dist, m), grp in targets.groupby(["indicator", "district_id", "month"], sort=True):
            ref = grp.value.to_numpy()
            if len(ref) < min_reference:
                findings.append(Finding("InsufficientReference", "district", dist,
                                        f"{ind} {format_month(m)}: {len(ref)} reference points"))
                continue
            q = fences(ref, multiplier)
            for fid, val in zip(grp.facility_id, grp.value):
                if val < q[2] or val > q[3]:
                    flags.append(MonitorFlag(fid, ind, int(m), scope, float(val),
                                             {"q1": q[0], "q3": q[1], "lower": q[2], "upper": q[3]}))
    else:
        raise ValueError("use bhattacharyya_flags for province distribution flags")
    return sorted(flags, key=_flag_key), sorted(findings)


def _flag_key(f: MonitorFlag):
    return (f.facility_id, f.indicator, f.flag_type.value, -1 if f.month is None else f.month)


# ---------------------------------------------------------------------------
# distribution drift
# ---------------------------------------------------------------------------


def shared_histograms(a, b, bins: int = 20):
    """Normalized histograms of ``a`` and ``b`` on equal-width bins over the pooled range.

    Returns ``None`` when the pooled range is degenerate.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both series must be non-empty")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        return None

    def hist(x):
        idx = np.clip(np.floor((x - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
        return np.bincount(idx, minlength=bins) / len(x)

    return hist(a), hist(b)


def bhattacharyya_distance(a, b, bins: int = 20) -> float:
    """``-ln`` of the Bhattacharyya coefficient; 0 for a degenerate pooled range."""
    h = shared_histograms(a, b, bins)
    if h is None:
        return 0.0
    bc = float(np.sum(np.sqrt(h[0] * h[1])))
    return abs(math.log(max(min(bc, 1.0), BC_FLOOR)))


def bhattacharyya_flags(series: pd.DataFrame, bins: int = 20, threshold: float = DEFAULT_THRESHOLD):
    """Compare each facility's monthly values with its province's; returns (flags, findings)."""
    flags, findings = [], []
    for (ind, prov), grp in series.groupby(["indicator", "province_id"], sort=True):
        pooled = grp.value.to_numpy()
        for fid, fg in grp.groupby("facility_id", sort=True):
            h = shared_histograms(fg.value.to_numpy(), pooled, bins)
            if h is None:
                findings.append(Finding("DegenerateRange", "facility", fid, f"{ind}: all values equal"))
                continue
            bc = float(np.sum(np.sqrt(h[0] * h[1])))
            d = -math.log(max(min(bc, 1.0), BC_FLOOR))
            if d > threshold:
                flags.append(MonitorFlag(fid, ind, None, FlagType.PROVINCE_DISTRIBUTION, d,
                                         {"bhattacharyya_distance": d, "threshold": threshold}))
    return sorted(flags, key=_flag_key), sorted(findings)


def flags_frame(flags: Sequence[MonitorFlag]) -> pd.DataFrame:
    return pd.DataFrame(
        [(f.facility_id, f.indicator, f.flag_type.value, "" if f.month is None else format_month(f.month),
          f.statistic, f.reference_summary) for f in flags],
        columns=["facility_id", "indicator", "flag_type", "month", "value", "reference_summary"],
    )


# ---------------------------------------------------------------------------
# FFS gap decomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubPeriodCost:
    visits: int
    cost_cents: int


@dataclass(frozen=True)
class FfsGapDecomposition:
    """Amounts are exact fractions of RWF.

    ``utilization_component + cost_per_visit_component + residual == total_gap``.
    """

    facility_id: str
    period: str
    capitation: Fraction
    ffs_current: Fraction
    ffs_reference: Fraction
    total_gap: Fraction
    expected_variability_band: tuple
    utilization_component: Fraction
    cost_per_visit_component: Fraction
    residual: Fraction

    @property
    def within_band(self) -> bool:
        lo, hi = self.expected_variability_band
        return lo <= self.ffs_current <= hi

    def row(self) -> dict:
        lo, hi = self.expected_variability_band
        return {"facility_id": self.facility_id, "period": self.period, "capitation": float(self.capitation),
                "ffs_current": float(self.ffs_current), "total_gap": float(self.total_gap),
                "band_low": float(lo), "band_high": float(hi),
                "utilization_component": float(self.utilization_component),
                "cost_per_visit_component": float(self.cost_per_visit_component), "residual": float(self.residual)}


def decompose_ffs_gap(capitation, reference: Sequence[SubPeriodCost], current: SubPeriodCost,
                      facility_id: str = "", period: str = "", multiplier: float = 1.5) -> FfsGapDecomposition:
    """Split ``capitation - FFS_current`` into utilization, cost-per-visit and residual parts.

    Reference visits are the mean over reference sub-periods; the reference
    cost per visit pools all of them. Amounts in RWF; costs come in cents.
    """
    if len(reference) < 4:
        raise InsufficientReference(f"{len(reference)} reference sub-periods; at least 4 are needed")
    ref_visits = sum(r.visits for r in reference)
    if ref_visits == 0:
        raise InsufficientReference("reference sub-periods have no visits")
    cap = Fraction(capitation)
    v_ref = Fraction(ref_visits, len(reference))
    c_ref = Fraction(sum(r.cost_cents for r in reference), 100 * ref_visits)
    v_now = current.visits
    c_now = Fraction(current.cost_cents, 100 * v_now) if v_now else c_ref
    ffs_now = Fraction(current.cost_cents, 100)
    ffs_ref = v_ref * c_ref
    total = cap - ffs_now
    util = (v_now - v_ref) * c_ref
    cpv = v_now * (c_now - c_ref)
    totals = [r.cost_cents / 100 for r in reference]
    q1, _, q3 = quartiles(totals)
    spread = Fraction(multiplier) * (Fraction(q3) - Fraction(q1))
    return FfsGapDecomposition(facility_id, period, cap, ffs_now, ffs_ref, total, (cap - spread, cap + spread),
                               util, cpv, total - util - cpv)


def facility_ffs_gaps(params, bundle: DatasetBundle, reference: Period, current: Period,
                      ambulance_copay_rate: float = 0.10):
    """Gap decomposition for every calibrated Health Center; returns (rows, findings).

    Reference sub-periods are the quarters of ``reference``; the capitation
    for ``current`` is the annual amount on reference inputs, prorated by months.
    """
    from .payment import predicted_annual

    ref_metrics = compute_metrics(bundle, reference, ambulance_copay_rate).by_id()
    subs = [compute_metrics(bundle, q, ambulance_copay_rate).by_id() for q in reference.quarters()]
    now = compute_metrics(bundle, current, ambulance_copay_rate).by_id()
    out, findings = [], []
    for fid in sorted(params.segmentation.tiers):
        if fid not in ref_metrics or fid not in now:
            findings.append(Finding("NoActivity", "facility", fid, "missing reference or current activity"))
            continue
        cap = Fraction(predicted_annual(params, ref_metrics[fid])) * current.n_months / 12
        ref = [SubPeriodCost(s[fid].hc_visits, s[fid].cost_cents) for s in subs if fid in s]
        cur = SubPeriodCost(now[fid].hc_visits, now[fid].cost_cents)
        try:
            out.append(decompose_ffs_gap(cap, ref, cur, fid, current.label))
        except InsufficientReference as exc:
            findings.append(Finding("InsufficientReference", "facility", fid, str(exc)))
    return out, findings
