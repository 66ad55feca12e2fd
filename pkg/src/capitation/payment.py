"""Capitation amounts, quarterly schedules and carry-forward reconciliation.

Quarterly inputs come from the same quarter of the previous year: U is the
capture-group median of the quarter's annualized in-center utilization,
I is the quarter's raw inflow visit count and M the current membership.
The quarterly base is ``A_tier * U * M / 4 + B * I`` so four identical
quarters add up to the annual formula. Tiers stay frozen at calibration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .calibration import CapitationParams, over_under
from .domain import CapitationError, DataError, Finding, Period, months_of_dates
from .ingest import DatasetBundle
from .metrics import FacilityMetrics, active_member_counts, compute_metrics
from .segmentation import Tier, UnknownFacility, lookup_U, segment


class MissingPriorQuarter(DataError):
    pass


class ZeroBase(CapitationError):
    """Prior prediction is zero, so the relative gap is undefined."""


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def capitation_amount(params: CapitationParams, tier, U: float, M: float, I: float) -> int:
    """``A_tier * U * M + B * I`` in whole RWF."""
    return round_half_up(params.a_for(Tier(tier)) * U * M + params.b * I)


@dataclass(frozen=True)
class QuarterInputs:
    tier: Tier
    U: float
    M: int
    I: float
    capture_group: int


def quarterly_base(params: CapitationParams, inputs: QuarterInputs) -> int:
    return round_half_up(params.a_for(inputs.tier) * inputs.U * inputs.M / 4 + params.b * inputs.I)


@dataclass(frozen=True)
class PaymentLine:
    facility_id: str
    quarter: str
    base_amount: int
    carried_adjustment: int = 0
    inputs: Optional[QuarterInputs] = None

    @property
    def final_amount(self) -> int:
        return self.base_amount + self.carried_adjustment


@dataclass(frozen=True)
class ReconciliationResult:
    facility_id: str
    quarter: str
    predicted_prior: int
    predicted_current: int
    relative_gap: float
    triggered: bool
    carry_forward_delta: int


def _require_quarter_data(bundle: DatasetBundle, quarter: Period) -> None:
    vis = bundle.visits
    months = set(months_of_dates(vis.visit_date[vis.approved]).tolist())
    missing = [m for m in quarter.months() if m not in months]
    if missing:
        raise MissingPriorQuarter(f"no approved visits in {quarter.label} ({len(missing)} of 3 months empty)")


def quarter_inputs(params: CapitationParams, bundle: DatasetBundle, quarter: Period, member_period: Period,
                   n_groups: int = 5, ambulance_copay_rate: float = 0.10):
    """Per-facility formula inputs measured on ``quarter``; returns (inputs, findings)."""
    if params.segmentation is None:
        raise ValueError("params carry no segmentation snapshot")
    _require_quarter_data(bundle, quarter)
    metrics = compute_metrics(bundle, quarter, ambulance_copay_rate)
    seg = segment(metrics, n_groups=n_groups)
    members = active_member_counts(bundle.members, member_period)
    by_id = metrics.by_id()
    findings = list(metrics.findings)
    out = {}
    for fid, tier in sorted(params.segmentation.tiers.items()):
        m = by_id.get(fid)
        if m is None:
            findings.append(Finding("NoQuarterData", "facility", fid, f"no activity in {quarter.label}"))
            continue
        out[fid] = QuarterInputs(tier, lookup_U(fid, seg), int(members.get(m.catchment_id, 0)),
                                 float(m.inflow_visits), seg.groups[fid])
    return out, findings


def quarterly_schedule(params: CapitationParams, bundle: DatasetBundle, fiscal_year: Period,
                       n_groups: int = 5, ambulance_copay_rate: float = 0.10):
    """Base payments for each quarter of ``fiscal_year``; returns (lines, findings)."""
    lines, findings = [], []
    for q in fiscal_year.quarters():
        inputs, f = quarter_inputs(params, bundle, q.shift_years(-1), fiscal_year, n_groups, ambulance_copay_rate)
        findings.extend(f)
        lines.extend(PaymentLine(fid, q.label, quarterly_base(params, inp), 0, inp) for fid, inp in inputs.items())
    return lines, findings


def reconcile(params: CapitationParams, line: PaymentLine, actual: QuarterInputs,
              threshold: float = 0.30) -> ReconciliationResult:
    """Compare the scheduled base with the base implied by the realized quarter."""
    prior = line.base_amount
    current = quarterly_base(params, replace(actual, tier=line.inputs.tier if line.inputs else actual.tier))
    if prior == 0:
        raise ZeroBase(f"{line.facility_id} {line.quarter}: scheduled base is 0")
    gap = Fraction(current - prior, prior)
    triggered = abs(gap) > Fraction(str(threshold))
    return ReconciliationResult(line.facility_id, line.quarter, prior, current, float(gap), triggered,
                                current - prior if triggered else 0)


def next_quarter(label: str, k: int = 1) -> str:
    year, q = int(label[:4]), int(label[-1])
    idx = year * 4 + q - 1 + k
    return f"{idx // 4}-Q{idx % 4 + 1}"


def split_amount(amount: int, parts: int) -> list[int]:
    base, extra = divmod(amount, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


class PaymentLedger:
    """Scheduled lines plus reconciliation results, one per facility and quarter.

    A triggered delta is never applied to its own quarter; it is spread over
    the next ``split`` quarters. Re-recording a quarter replaces the earlier
    result, so reconciliation is idempotent.
    """

    def __init__(self, lines: Iterable[PaymentLine] = (), split: int = 1):
        if split < 1:
            raise ValueError("split must be at least 1")
        self.split = split
        self._lines: dict[tuple[str, str], PaymentLine] = {}
        self._results: dict[tuple[str, str], ReconciliationResult] = {}
        self.review: list[Finding] = []
        self.add_lines(lines)

    def add_lines(self, lines: Iterable[PaymentLine]) -> None:
        for line in lines:
            self._lines[(line.facility_id, line.quarter)] = replace(line, carried_adjustment=0)

    def record(self, result: ReconciliationResult) -> None:
        self._results[(result.facility_id, result.quarter)] = result

    def reconcile(self, params: CapitationParams, actual: dict, quarter: str, threshold: float = 0.30) -> list:
        """Reconcile every line of ``quarter`` against realized inputs ``{facility_id: QuarterInputs}``."""
        results = []
        for (fid, q), line in sorted(self._lines.items()):
            if q != quarter:
                continue
            if fid not in actual:
                self.review.append(Finding("NoRealizedData", "facility", fid, f"no realized data for {q}"))
                continue
            try:
                res = reconcile(params, line, actual[fid], threshold)
            except ZeroBase as exc:
                self.review.append(Finding("ZeroBase", "facility", fid, str(exc)))
                continue
            self.record(res)
            results.append(res)
        return results

    @property
    def results(self) -> list[ReconciliationResult]:
        return [self._results[k] for k in sorted(self._results)]

    def _adjustments(self) -> dict[tuple[str, str], int]:
        adj: dict[tuple[str, str], int] = {}
        for (fid, q), res in self._results.items():
            if not res.triggered:
                continue
            for k, part in enumerate(split_amount(res.carry_forward_delta, self.split), 1):
                key = (fid, next_quarter(q, k))
                adj[key] = adj.get(key, 0) + part
        return adj

    def lines(self) -> list[PaymentLine]:
        adj = self._adjustments()
        return [replace(line, carried_adjustment=adj.get(key, 0)) for key, line in sorted(self._lines.items())]

    def pending(self) -> dict[tuple[str, str], int]:
        """Adjustments aimed at quarters with no scheduled line yet."""
        return {k: v for k, v in sorted(self._adjustments().items()) if k not in self._lines and v}

    def triggered_total(self) -> int:
        return sum(r.carry_forward_delta for r in self._results.values() if r.triggered)


def lines_frame(lines: Sequence[PaymentLine]) -> pd.DataFrame:
    return pd.DataFrame(
        [(l.facility_id, l.quarter, l.base_amount, l.carried_adjustment, l.final_amount) for l in lines],
        columns=["facility_id", "quarter", "base_amount", "carried_adjustment", "final_amount"],
    )


def results_frame(results: Sequence[ReconciliationResult]) -> pd.DataFrame:
    return pd.DataFrame(
        [(r.facility_id, r.quarter, r.predicted_prior, r.predicted_current, r.relative_gap,
          "true" if r.triggered else "false", r.carry_forward_delta) for r in results],
        columns=["facility_id", "quarter", "predicted_prior", "predicted_current", "relative_gap",
                 "triggered", "carry_forward_delta"],
    )


# ---------------------------------------------------------------------------
# comparison with historical cost
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VariationReport:
    rows: pd.DataFrame  # facility_id, historical, predicted, variation
    bin_edges: np.ndarray
    bin_counts: np.ndarray
    tolerance: float
    n_over: int
    n_under: int
    findings: tuple = field(default=())

    @property
    def share_underpaid(self) -> float:
        return float((self.rows.variation < 0).mean()) if len(self.rows) else 0.0

    def histogram_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"bin_low": self.bin_edges[:-1], "bin_high": self.bin_edges[1:],
                             "count": self.bin_counts})


def predicted_annual(params: CapitationParams, m: FacilityMetrics) -> int:
    return capitation_amount(params, params.segmentation.tiers[m.facility_id],
                             lookup_U(m.facility_id, params.segmentation), m.member_count, m.inflow)


def compare_to_history(params: CapitationParams, metrics: Iterable[FacilityMetrics], tolerance: float = 0.30,
                       bin_width: float = 0.1) -> VariationReport:
    """Relative difference of predicted capitation from historical annualized cost."""
    rows, findings = [], []
    for m in sorted(metrics, key=lambda m: m.facility_id):
        if m.annualized_cost_cents <= 0:
            findings.append(Finding("ZeroHistoricalCost", "facility", m.facility_id, "skipped: no historical cost"))
            continue
        try:
            pred = predicted_annual(params, m)
        except (KeyError, UnknownFacility):
            findings.append(Finding("NotCalibrated", "facility", m.facility_id, "skipped: not in calibration"))
            continue
        rows.append((m.facility_id, m.annualized_cost, pred, (pred - m.annualized_cost) / m.annualized_cost))
    df = pd.DataFrame(rows, columns=["facility_id", "historical", "predicted", "variation"])
    var = df.variation.to_numpy()
    if len(var):
        lo = math.floor(var.min() / bin_width)
        hi = math.floor(var.max() / bin_width) + 1
        edges = np.arange(lo, hi + 1) * bin_width
        counts, _ = np.histogram(var, bins=edges)
    else:
        edges, counts = np.array([0.0]), np.array([], dtype=int)
    over, under = over_under(df.predicted.to_numpy(float), df.historical.to_numpy(float), tolerance)
    return VariationReport(df, edges, counts, tolerance, over, under, tuple(findings))
