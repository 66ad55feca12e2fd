"""Per-Health-Center capitation metrics.

Managed public Health Posts are merged into their parent Health Center:
their visits count as Health Center visits for cost, capture and inflow.
Private Health Posts only enter the catchment PHC utilization rate.

The metrics universe for a period is every approved visit dated in the
period by a known CBHI member at a known facility.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
import pandas as pd

from .domain import (
    CostKind,
    DataError,
    FacilityKind,
    Finding,
    MemberStatus,
    Period,
    Scheme,
    VisitRecord,
    month_start,
    months_of_dates,
)
from .ingest import DatasetBundle


class ZeroActivity(DataError):
    pass


class MissingCatchment(DataError):
    pass


def round_half_up_ratio(num, den):
    """Round ``num / den`` half-up for non-negative integers (arrays allowed)."""
    return (2 * num + den) // (2 * den)


def _rate_fraction(rate: float) -> Fraction:
    return Fraction(str(rate))


@dataclass(frozen=True)
class VisitCostSummary:
    visit_id: str
    phc_cost_gross: int
    ambulance_cost: int
    copay_deducted: int
    phc_cost_net: int
    contains_non_phc: bool
    findings: tuple = ()


def visit_net_cost(visit: VisitRecord, ambulance_copay_rate: float = 0.10) -> VisitCostSummary:
    """Net PHC cost of one visit (cents).

    The ambulance share of the recorded co-payment is
    ``min(recorded, rate * ambulance cost)``; only the rest of the co-payment
    is deducted from the non-ambulance items.
    """
    gross = sum(i.cost for i in visit.cost_items if i.kind is not CostKind.AMBULANCE)
    ambulance = sum(i.cost for i in visit.cost_items if i.kind is CostKind.AMBULANCE)
    rate = _rate_fraction(ambulance_copay_rate)
    estimated = int(round_half_up_ratio(ambulance * rate.numerator, rate.denominator))
    deducted = visit.recorded_copay_total - min(visit.recorded_copay_total, estimated)
    net = gross - deducted
    findings = ()
    if net < 0:
        findings = (Finding("NegativeNetCost", "visit", visit.visit_id,
                            f"co-payment exceeds item costs by {-net} cents; clamped to 0"),)
        net = 0
    return VisitCostSummary(visit.visit_id, gross, ambulance, deducted, net,
                            any(i.is_non_phc for i in visit.cost_items), findings)


def visit_cost_table(bundle: DatasetBundle, ambulance_copay_rate: float = 0.10) -> pd.DataFrame:
    """Vectorised :func:`visit_net_cost` for every visit, indexed by visit_id."""
    items = bundle.items
    cost = items.quantity.to_numpy() * items.unit_cost.to_numpy()
    is_amb = (items.kind == CostKind.AMBULANCE.value).to_numpy()
    frame = pd.DataFrame({
        "visit_id": items.visit_id.to_numpy(),
        "gross": np.where(is_amb, 0, cost),
        "ambulance": np.where(is_amb, cost, 0),
        "non_phc": items.is_non_phc.to_numpy(),
    })
    agg = frame.groupby("visit_id", sort=False).agg(gross=("gross", "sum"), ambulance=("ambulance", "sum"),
                                                     non_phc=("non_phc", "any"))
    out = pd.DataFrame(index=pd.Index(bundle.visits.visit_id, name="visit_id"))
    out = out.join(agg)
    out["gross"] = out.gross.fillna(0).astype(np.int64)
    out["ambulance"] = out.ambulance.fillna(0).astype(np.int64)
    out["non_phc"] = out.non_phc.eq(True).to_numpy()
    copay = bundle.visits.recorded_copay_total.to_numpy()
    rate = _rate_fraction(ambulance_copay_rate)
    estimated = round_half_up_ratio(out.ambulance.to_numpy() * rate.numerator, rate.denominator)
    deducted = copay - np.minimum(copay, estimated)
    net = out.gross.to_numpy() - deducted
    out["copay_deducted"] = deducted
    out["negative"] = net < 0
    out["net"] = np.maximum(net, 0)
    return out


def annualize(value, months_active: int):
    """Scale a partial-year total to a yearly value."""
    if months_active == 0:
        raise ZeroActivity("no months of activity")
    if not 1 <= months_active <= 12:
        raise ValueError("months_active must be between 1 and 12")
    return value * 12 / months_active


def _semester_start_years(period: Period) -> tuple[int, int]:
    return month_start(period.start).year - 1, month_start(period.end).year + 1


def active_members(members: pd.DataFrame, period: Period) -> pd.DataFrame:
    """CBHI members counted as active for ``period``.

    Active status counts directly; any member not marked inactive whose
    record was last updated on 1 January or 1 July of a year within (or
    adjacent to) the period is assumed to have paid and counts too.
    """
    lo, hi = _semester_start_years(period)
    upd = members.last_updated
    semester = (upd.dt.day == 1) & upd.dt.month.isin([1, 7]) & upd.dt.year.between(lo, hi)
    status = members.status
    active = (status == MemberStatus.ACTIVE.value) | ((status != MemberStatus.INACTIVE.value) & semester)
    return members.loc[active & (members.scheme == Scheme.CBHI.value)]


def active_member_counts(members: pd.DataFrame, period: Period) -> pd.Series:
    return active_members(members, period).groupby("catchment_id").size()


@dataclass(frozen=True)
class FacilityMetrics:
    """Metrics of one Health Center (with its managed posts) over one period.

    Rates are annualized visits per member: ``annualize(count, months) / M``.
    """

    facility_id: str
    period: str
    catchment_id: str
    district_id: str
    province_id: str
    medicalized: bool
    months_active: int
    member_count: int
    cost_cents: int
    annualized_cost_cents: int
    hc_visits: int
    own_visits: int
    inflow_visits: int
    member_visits: int
    phc_utilization_rate: float
    hc_utilization_rate: float
    capture_ratio: float
    inflow: float

    @property
    def annualized_cost(self) -> float:
        return self.annualized_cost_cents / 100

    @property
    def cost_per_visit(self) -> float:
        return self.cost_cents / 100 / self.hc_visits if self.hc_visits else 0.0


@dataclass(frozen=True)
class MetricsResult:
    period: Period
    metrics: tuple
    findings: tuple = field(default=())

    def __iter__(self):
        return iter(self.metrics)

    def __len__(self):
        return len(self.metrics)

    def by_id(self) -> dict[str, FacilityMetrics]:
        return {m.facility_id: m for m in self.metrics}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(m) for m in self.metrics])

    def report_frame(self) -> pd.DataFrame:
        """The published metrics table (costs in whole RWF)."""
        rows = [
            (m.facility_id, m.period, int(round_half_up_ratio(m.annualized_cost_cents, 100)), m.months_active,
             m.member_count, m.phc_utilization_rate, m.hc_utilization_rate, m.capture_ratio, m.inflow)
            for m in self.metrics
        ]
        return pd.DataFrame(rows, columns=["facility_id", "period", "annualized_cost", "months_active", "M",
                                           "phc_utilization_rate", "u", "capture_ratio", "inflow"])


def health_center_groups(facilities: pd.DataFrame) -> pd.Series:
    """Map facility_id -> owning Health Center id (HCs and managed posts only)."""
    hc = facilities.kind == FacilityKind.HEALTH_CENTER.value
    hc_ids = set(facilities.facility_id[hc])
    php = (facilities.kind == FacilityKind.PUBLIC_HEALTH_POST.value) & facilities.parent_hc_id.isin(hc_ids)
    return pd.concat([
        pd.Series(facilities.facility_id[hc].to_numpy(), index=facilities.facility_id[hc].to_numpy()),
        pd.Series(facilities.parent_hc_id[php].to_numpy(), index=facilities.facility_id[php].to_numpy()),
    ])


def period_visits(bundle: DatasetBundle, period: Period) -> pd.DataFrame:
    """Visits in the metrics universe, annotated with month, member catchment and HC group."""
    vis = bundle.visits
    month = months_of_dates(vis.visit_date)
    in_period = vis.approved.to_numpy() & (month >= period.start) & (month <= period.end)
    v = vis.loc[in_period, ["visit_id", "facility_id", "member_id"]].copy()
    v["month"] = month[in_period]
    mem = bundle.members
    cbhi = mem.loc[mem.scheme == Scheme.CBHI.value]
    v["member_catchment"] = v.member_id.map(pd.Series(cbhi.catchment_id.to_numpy(), index=cbhi.member_id.to_numpy()))
    v = v.loc[v.member_catchment.notna() & v.facility_id.isin(set(bundle.facilities.facility_id))]
    v["hc"] = v.facility_id.map(health_center_groups(bundle.facilities))
    return v


def compute_metrics(bundle: DatasetBundle, period: Period, ambulance_copay_rate: float = 0.10) -> MetricsResult:
    """Cost, membership, utilization, capture and inflow for every Health Center."""
    fac = bundle.facilities
    hcs = fac.loc[fac.kind == FacilityKind.HEALTH_CENTER.value].sort_values("facility_id")
    if (hcs.catchment_id == "").any():
        missing = ", ".join(hcs.facility_id[hcs.catchment_id == ""].head(5))
        raise MissingCatchment(f"health centers without catchment: {missing}")
    findings: list[Finding] = []

    v = period_visits(bundle, period)
    hc_catchment = pd.Series(hcs.catchment_id.to_numpy(), index=hcs.facility_id.to_numpy())
    at_hc = v.hc.notna()
    group_catchment = v.hc.map(hc_catchment)
    own = at_hc & (v.member_catchment == group_catchment)
    inflow = at_hc & ~own

    own_n = v.loc[own].groupby("hc").size()
    inflow_n = v.loc[inflow].groupby("hc").size()
    member_n = v.groupby("member_catchment").size()

    # months with at least one visit, bounded by the facility's active range
    hv = v.loc[at_hc, ["hc", "month"]]
    bounds = hcs.set_index("facility_id")[["first_active_month", "last_active_month"]]
    lo = hv.hc.map(bounds.first_active_month).to_numpy()
    hi = hv.hc.map(bounds.last_active_month).to_numpy()
    hv = hv.loc[(hv.month.to_numpy() >= lo) & (hv.month.to_numpy() <= hi)]
    months_n = hv.drop_duplicates().groupby("hc").size()

    costs = visit_cost_table(bundle, ambulance_copay_rate)
    hc_costs = costs.loc[v.visit_id[at_hc]]
    hc_costs = hc_costs.assign(hc=v.hc[at_hc].to_numpy())
    for vid in hc_costs.index[hc_costs.negative.to_numpy()]:
        findings.append(Finding("NegativeNetCost", "visit", vid, "co-payment exceeds item costs; clamped to 0"))
    cost_n = hc_costs.loc[~hc_costs.non_phc.to_numpy()].groupby("hc").net.sum()

    members_n = active_member_counts(bundle.members, period)

    out = []
    for r in hcs.itertuples(index=False):
        fid = r.facility_id
        months = int(months_n.get(fid, 0))
        if months == 0:
            findings.append(Finding("ZeroActivity", "facility", fid, f"no active months in {period.label}"))
            continue
        m_count = int(members_n.get(r.catchment_id, 0))
        own_v = int(own_n.get(fid, 0))
        in_v = int(inflow_n.get(fid, 0))
        mem_v = int(member_n.get(r.catchment_id, 0))
        cost = int(cost_n.get(fid, 0))
        if m_count > 0:
            phc_rate = annualize(mem_v, months) / m_count
            hc_rate = annualize(own_v, months) / m_count
        else:
            phc_rate = hc_rate = 0.0
            findings.append(Finding("ZeroMembers", "facility", fid, "no active members in catchment; rates set to 0"))
        if mem_v > 0:
            capture = own_v / mem_v
        else:
            capture = 0.0
            findings.append(Finding("ZeroDenominator", "facility", fid,
                                    "no catchment-member visits; capture ratio set to 0"))
        out.append(FacilityMetrics(
            facility_id=fid, period=period.label, catchment_id=r.catchment_id, district_id=r.district_id,
            province_id=r.province_id, medicalized=bool(r.medicalized), months_active=months,
            member_count=m_count, cost_cents=cost,
            annualized_cost_cents=int(round_half_up_ratio(cost * 12, months)),
            hc_visits=own_v + in_v, own_visits=own_v, inflow_visits=in_v, member_visits=mem_v,
            phc_utilization_rate=phc_rate, hc_utilization_rate=hc_rate, capture_ratio=capture,
            inflow=annualize(in_v, months),
        ))
    return MetricsResult(period, tuple(out), tuple(sorted(findings)))
