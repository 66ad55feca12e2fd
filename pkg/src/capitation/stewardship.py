"""Pediatric antibiotic prescribing analytics.

The cohort is approved visits of children under the age cutoff whose
diagnoses all fall in one category. Nothing here is random.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from .domain import CapitationError, CostKind, DiagnosisCategory, FacilityKind, Finding, Period, months_of_dates
from .ingest import DatasetBundle
from .metrics import FacilityMetrics, health_center_groups
from .monitoring import quartiles
from .segmentation import equal_count_groups

DEFAULT_KINDS = (FacilityKind.HEALTH_CENTER, FacilityKind.PUBLIC_HEALTH_POST)


class EmptyAntibioticSet(CapitationError):
    pass


@dataclass(frozen=True)
class Cohort:
    visits: pd.DataFrame  # visit_id, facility_id, hc, category, abx, antihistamine
    items: pd.DataFrame  # drug lines of cohort visits with code flags
    composition: dict  # category count -> share of pediatric visits
    n_pediatric: int
    age_cutoff: int
    facility_kinds: tuple
    period: str = ""

    def summary(self) -> dict:
        return {"age_cutoff": self.age_cutoff, "facility_kinds": [k.value for k in self.facility_kinds],
                "period": self.period, "pediatric_visits": self.n_pediatric, "cohort_visits": len(self.visits),
                "composition": self.composition}


def pediatric_single_category_cohort(bundle: DatasetBundle, age_cutoff: int = 15,
                                     facility_kinds: Iterable = DEFAULT_KINDS,
                                     period: Optional[Period] = None) -> Cohort:
    kinds = tuple(FacilityKind(k) for k in facility_kinds)
    vis = bundle.visits
    fac = bundle.facilities
    kind_of = pd.Series(fac.kind.to_numpy(), index=fac.facility_id.to_numpy())
    keep = vis.approved.to_numpy() & (vis.patient_age_years < age_cutoff).to_numpy()
    keep &= vis.facility_id.map(kind_of).isin([k.value for k in kinds]).to_numpy()
    if period is not None:
        month = months_of_dates(vis.visit_date)
        keep &= (month >= period.start) & (month <= period.end)
    ped = vis.loc[keep, ["visit_id", "facility_id", "diagnosis_categories"]]
    n_cat = ped.diagnosis_categories.map(lambda s: len(s.split("|")) if s else 0).to_numpy()
    n_ped = len(ped)
    composition = {}
    for label, mask in (("0", n_cat == 0), ("1", n_cat == 1), ("2", n_cat == 2), ("3+", n_cat >= 3)):
        composition[label] = float(mask.sum() / n_ped) if n_ped else 0.0

    cohort = ped.loc[n_cat == 1, ["visit_id", "facility_id"]].copy()
    cohort["category"] = ped.diagnosis_categories[n_cat == 1].to_numpy()
    cohort["hc"] = cohort.facility_id.map(health_center_groups(fac)).fillna(cohort.facility_id).to_numpy()
    items = bundle.items
    items = items.loc[items.visit_id.isin(set(cohort.visit_id)) & (items.kind == CostKind.DRUG.value)]
    cohort["abx"] = cohort.visit_id.isin(set(items.visit_id[items.is_antibiotic])).to_numpy()
    cohort["antihistamine"] = cohort.visit_id.isin(set(items.visit_id[items.is_antihistamine])).to_numpy()
    return Cohort(cohort.reset_index(drop=True), items.reset_index(drop=True), composition, n_ped, age_cutoff,
                  kinds, period.label if period else "")


def boxplot_stats(values, multiplier: float = 1.5) -> dict:
    q1, med, q3 = quartiles(values)
    x = np.asarray(values, dtype=float)
    lo, hi = q1 - multiplier * (q3 - q1), q3 + multiplier * (q3 - q1)
    out = x[(x < lo) | (x > hi)]
    inside = x[(x >= lo) & (x <= hi)]
    return {"n": len(x), "min": float(x.min()), "q1": q1, "median": med, "q3": q3, "max": float(x.max()),
            "whisker_low": float(inside.min()), "whisker_high": float(inside.max()), "n_outliers": len(out)}


@dataclass(frozen=True)
class RateReport:
    rates: pd.DataFrame  # facility_id, category, visits, prescribed, rate
    boxplots: pd.DataFrame
    findings: tuple = field(default=())


def _rates(cohort: Cohort, flag: str, min_visits: int) -> RateReport:
    v = cohort.visits
    if v.empty:
        raise ValueError("empty cohort")
    g = v.groupby(["facility_id", "category"], sort=True)
    tab = g.agg(visits=("visit_id", "size"), prescribed=(flag, "sum")).reset_index()
    tab["rate"] = tab.prescribed / tab.visits
    small = tab.visits < min_visits
    findings = tuple(Finding("SuppressedRate", "facility", r.facility_id,
                             f"{r.category}: {r.visits} visits < {min_visits}")
                     for r in tab.loc[small].itertuples())
    tab = tab.loc[~small].reset_index(drop=True)
    rows = []
    for cat in [c.value for c in DiagnosisCategory]:
        vals = tab.rate[tab.category == cat].to_numpy()
        if len(vals):
            rows.append({"category": cat, **boxplot_stats(vals)})
    return RateReport(tab, pd.DataFrame(rows), findings)


def prescription_rate_by_category(cohort: Cohort, min_visits: int = 10) -> RateReport:
    """Share of cohort visits with an antibiotic, per facility and category."""
    return _rates(cohort, "abx", min_visits)


def antihistamine_rate_by_category(cohort: Cohort, min_visits: int = 10) -> RateReport:
    return _rates(cohort, "antihistamine", min_visits)


def _share_table(items: pd.DataFrame) -> pd.DataFrame:
    abx = items.loc[items.is_antibiotic]
    if abx.empty:
        raise EmptyAntibioticSet("no antibiotic items in the cohort")
    abx = abx.assign(cost=abx.quantity * abx.unit_cost)
    tab = abx.groupby("item_code").agg(prescriptions=("visit_id", "size"), cost_cents=("cost", "sum"))
    tab = tab.reset_index()
    tab["frequency_share"] = tab.prescriptions / tab.prescriptions.sum()
    tab["cost_share"] = tab.cost_cents / tab.cost_cents.sum() if tab.cost_cents.sum() else 0.0
    return tab


def antibiotic_shares(cohort: Cohort, top_n: int = 8) -> pd.DataFrame:
    """Frequency and cost shares of the ``top_n`` most prescribed codes plus ``Other``.

    Ties in prescription count break by code.
    """
    tab = _share_table(cohort.items)
    tab = tab.sort_values(["prescriptions", "item_code"], ascending=[False, True], kind="stable")
    tab["frequency_rank"] = np.arange(1, len(tab) + 1)
    tab["cost_rank"] = tab.cost_share.rank(ascending=False, method="first").astype(int)
    top = tab.head(top_n)
    rest = tab.iloc[top_n:]
    if len(rest):
        other = pd.DataFrame([{
            "item_code": "Other", "prescriptions": rest.prescriptions.sum(), "cost_cents": rest.cost_cents.sum(),
            "frequency_share": rest.frequency_share.sum(), "cost_share": rest.cost_share.sum(),
            "frequency_rank": 0, "cost_rank": 0}])
        top = pd.concat([top, other], ignore_index=True)
    top.attrs["n_other_codes"] = len(rest)
    return top.reset_index(drop=True)


def cost_group_breakdown(cohort: Cohort, facility_metrics: Iterable[FacilityMetrics], n_groups: int = 4,
                         top_n: int = 8) -> pd.DataFrame:
    """Antibiotic cost shares per equal-count group of Health Centers ranked by cost per visit.

    Group 1 holds the lowest cost per visit. Codes outside the overall
    ``top_n`` by frequency are pooled as ``Other``.
    """
    metrics = [m for m in facility_metrics if m.hc_visits > 0]
    ids = [m.facility_id for m in metrics]
    cpv = [m.cost_per_visit for m in metrics]
    groups = dict(zip(ids, equal_count_groups(cpv, ids, n_groups) + 1))
    top = set(antibiotic_shares(cohort, top_n).item_code) - {"Other"}
    hc = pd.Series(cohort.visits.hc.to_numpy(), index=cohort.visits.visit_id.to_numpy())
    items = cohort.items.loc[cohort.items.is_antibiotic]
    items = items.assign(group=items.visit_id.map(hc).map(groups),
                         code=np.where(items.item_code.isin(top), items.item_code, "Other"),
                         cost=items.quantity * items.unit_cost)
    items = items.loc[items.group.notna()]
    tab = items.groupby(["group", "code"]).cost.sum().rename("cost_cents").reset_index()
    tab["group"] = tab.group.astype(int)
    tab["cost_share"] = tab.cost_cents / tab.groupby("group").cost_cents.transform("sum")
    tab["frequency"] = items.groupby(["group", "code"]).size().to_numpy()
    tab["frequency_share"] = tab.frequency / tab.groupby("group").frequency.transform("sum")
    return tab.rename(columns={"code": "item_code"})[
        ["group", "item_code", "frequency", "frequency_share", "cost_cents", "cost_share"]]


def abx_summary(cohort: Cohort, rates: RateReport, shares: pd.DataFrame) -> dict:
    top = shares.loc[shares.item_code != "Other"]
    return {
        "cohort": cohort.summary(),
        "facilities_reported": int(rates.rates.facility_id.nunique()),
        "suppressed_rates": len(rates.findings),
        "pooled_rate_by_category": {
            cat: float(g.prescribed.sum() / g.visits.sum()) for cat, g in rates.rates.groupby("category")},
        "top_frequency_share": float(top.frequency_share.sum()),
        "top_cost_share": float(top.cost_share.sum()),
        "n_other_codes": int(shares.attrs.get("n_other_codes", 0)),
    }
