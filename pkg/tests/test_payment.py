from fractions import Fraction

import numpy as np
import pytest

from capitation.calibration import CapitationParams, build_design, fit_ols
from capitation.domain import Period
from capitation.metrics import active_member_counts, compute_metrics
from capitation.payment import (
    MissingPriorQuarter,
    PaymentLedger,
    PaymentLine,
    QuarterInputs,
    ZeroBase,
    capitation_amount,
    compare_to_history,
    next_quarter,
    quarter_inputs,
    quarterly_base,
    quarterly_schedule,
    reconcile,
    split_amount,
)
from capitation.segmentation import Tier, lookup_U, segment
from capitation.synthgen import GeneratorSpec, generate
from oracles import half_up

REFERENCE = CapitationParams(912.0, 1278.0, 1562.0, 1126.0)
INFLOW_ONLY = CapitationParams(0.0, 0.0, 0.0, 1.0)


def calibrated(bundle, period):
    res = compute_metrics(bundle, period)
    seg = segment(res.metrics)
    return fit_ols(build_design(res.metrics, seg), period.label, seg), res, seg


class TestCapitationAmount:
    def test_worked_example(self):
        expected = half_up(Fraction(1278) * Fraction("0.664") * 20209 + 1126 * 10000)
        assert expected == 28_409_196
        assert capitation_amount(REFERENCE, Tier.MEDIUM, 0.664, 20209, 10000) == expected

    def test_zero(self):
        assert capitation_amount(REFERENCE, Tier.LOW, 0.7, 0, 0) == 0

    def test_inflow_only(self):
        assert capitation_amount(REFERENCE, Tier.HIGH, 0.7, 0, 5) == 5 * 1126

    def test_half_up(self):
        assert capitation_amount(CapitationParams(0, 0, 0, 0.5), Tier.LOW, 0, 0, 1) == 1

    def test_linear_in_params(self):
        a = capitation_amount(REFERENCE, Tier.HIGH, 0.8, 20000, 3000)
        b = capitation_amount(REFERENCE.scaled(2.0), Tier.HIGH, 0.8, 20000, 3000)
        assert abs(b - 2 * a) <= 1


class TestReconcile:
    def line(self, I=1000):
        inp = QuarterInputs(Tier.LOW, 0.0, 0, float(I), 1)
        return PaymentLine("H1", "2024-Q1", quarterly_base(INFLOW_ONLY, inp), 0, inp)

    def test_identity(self):
        r = reconcile(INFLOW_ONLY, self.line(), self.line().inputs)
        assert r.relative_gap == 0 and not r.triggered and r.carry_forward_delta == 0

    def test_boundary_not_triggered(self):
        r = reconcile(INFLOW_ONLY, self.line(), QuarterInputs(Tier.LOW, 0.0, 0, 1300.0, 1))
        assert r.relative_gap == pytest.approx(0.3) and not r.triggered
        r = reconcile(INFLOW_ONLY, self.line(), QuarterInputs(Tier.LOW, 0.0, 0, 700.0, 1))
        assert not r.triggered

    def test_just_over_boundary(self):
        r = reconcile(INFLOW_ONLY, self.line(), QuarterInputs(Tier.LOW, 0.0, 0, 1301.0, 1))
        assert r.triggered and r.carry_forward_delta == 301

    def test_inflow_surge(self):
        # inflow share of the base is above 60%, so +50% inflow moves the base by more than 30%
        prior = QuarterInputs(Tier.MEDIUM, 0.5, 400, 300.0, 3)
        base = quarterly_base(REFERENCE, prior)
        assert 1126 * 300 / base > 0.6
        r = reconcile(REFERENCE, PaymentLine("H1", "2024-Q1", base, 0, prior),
                      QuarterInputs(Tier.MEDIUM, 0.5, 400, 450.0, 3))
        hand = (round(1278 * 0.5 * 400 / 4 + 1126 * 450) - base) / base
        assert r.triggered and r.carry_forward_delta > 0
        assert r.relative_gap == pytest.approx(hand)

    def test_tier_frozen(self):
        r = reconcile(REFERENCE, PaymentLine("H1", "2024-Q1", 100, 0, QuarterInputs(Tier.LOW, 1, 4, 0, 1)),
                      QuarterInputs(Tier.HIGH, 1, 4, 0.0, 1))
        assert r.predicted_current == 912

    def test_zero_base(self):
        with pytest.raises(ZeroBase):
            reconcile(INFLOW_ONLY, self.line(0), self.line(5).inputs)


class TestLedger:
    def test_delta_goes_to_next_quarter(self):
        inp = QuarterInputs(Tier.LOW, 0.0, 0, 1000.0, 1)
        lines = [PaymentLine("H1", q, 1000, 0, inp) for q in ("2024-Q1", "2024-Q2")]
        ledger = PaymentLedger(lines)
        ledger.reconcile(INFLOW_ONLY, {"H1": QuarterInputs(Tier.LOW, 0.0, 0, 2000.0, 1)}, "2024-Q1")
        q1, q2 = ledger.lines()
        assert q1.final_amount == 1000 and q2.carried_adjustment == 1000 and q2.final_amount == 2000

    def test_idempotent(self):
        inp = QuarterInputs(Tier.LOW, 0.0, 0, 1000.0, 1)
        ledger = PaymentLedger([PaymentLine("H1", "2024-Q1", 1000, 0, inp), PaymentLine("H1", "2024-Q2", 1000, 0, inp)])
        actual = {"H1": QuarterInputs(Tier.LOW, 0.0, 0, 2000.0, 1)}
        ledger.reconcile(INFLOW_ONLY, actual, "2024-Q1")
        ledger.reconcile(INFLOW_ONLY, actual, "2024-Q1")
        assert len(ledger.results) == 1
        assert ledger.lines()[1].carried_adjustment == 1000

    def test_split_and_pending(self):
        inp = QuarterInputs(Tier.LOW, 0.0, 0, 1000.0, 1)
        ledger = PaymentLedger([PaymentLine("H1", "2024-Q4", 1000, 0, inp)], split=3)
        ledger.reconcile(INFLOW_ONLY, {"H1": QuarterInputs(Tier.LOW, 0.0, 0, 2000.0, 1)}, "2024-Q4")
        assert ledger.pending() == {("H1", "2025-Q1"): 334, ("H1", "2025-Q2"): 333, ("H1", "2025-Q3"): 333}

    def test_missing_realized_data_flagged(self):
        ledger = PaymentLedger([PaymentLine("H1", "2024-Q1", 1000, 0, QuarterInputs(Tier.LOW, 0, 0, 1000.0, 1))])
        ledger.reconcile(INFLOW_ONLY, {}, "2024-Q1")
        assert [f.code for f in ledger.review] == ["NoRealizedData"]

    def test_helpers(self):
        assert next_quarter("2024-Q4") == "2025-Q1"
        assert next_quarter("2024-Q2", 3) == "2025-Q1"
        assert split_amount(-7, 2) == [-3, -4]
        assert sum(split_amount(-7, 2)) == -7


@pytest.fixture(scope="module")
def stationary():
    spec = GeneratorSpec(n_health_centers=30, population_scale=0.01, stationary=True,
                         calibration_period="2022-07:2023-06")
    bundle, _ = generate(spec)
    return bundle


class TestSchedule:
    def test_quarters_sum_to_annual(self, stationary):
        prior = Period.parse("FY2023")
        fy = Period.parse("FY2024")
        params, res, seg = calibrated(stationary, prior)
        lines, _ = quarterly_schedule(params, stationary, fy)
        members = active_member_counts(stationary.members, fy)
        totals = {}
        for l in lines:
            totals.setdefault(l.facility_id, []).append(l.base_amount)
        assert len(totals) == 30
        for m in res.metrics:
            annual = capitation_amount(params, params.segmentation.tiers[m.facility_id],
                                       lookup_U(m.facility_id, seg), int(members.get(m.catchment_id, 0)), m.inflow)
            q = totals[m.facility_id]
            assert len(q) == 4
            assert abs(sum(q) - annual) <= 2
            assert max(q) - min(q) <= 1

    def test_missing_prior_quarter(self, small_generated):
        bundle, _ = small_generated
        params, _, _ = calibrated(bundle, Period.parse("2023"))
        with pytest.raises(MissingPriorQuarter):
            quarterly_schedule(params, bundle, Period.parse("FY2023"))

    def test_quarter_inputs_use_raw_inflow(self, small_generated):
        bundle, _ = small_generated
        params, _, _ = calibrated(bundle, Period.parse("2023"))
        q = Period.parse("2023-Q2")
        inputs, _ = quarter_inputs(params, bundle, q, Period.parse("FY2024"))
        res = compute_metrics(bundle, q).by_id()
        fid = sorted(inputs)[0]
        assert inputs[fid].I == res[fid].inflow_visits


class TestCompare:
    def test_noiseless_variation_small(self, small_generated):
        bundle, _ = small_generated
        params, res, _ = calibrated(bundle, Period.parse("2023"))
        rep = compare_to_history(params, res.metrics)
        assert len(rep.rows) == 40
        assert np.all(np.abs(rep.rows.variation) < 1e-5)
        assert rep.n_over == rep.n_under == 0
        assert rep.bin_counts.sum() == 40

    def test_identity_params(self, small_generated):
        bundle, _ = small_generated
        params, res, _ = calibrated(bundle, Period.parse("2023"))
        rep = compare_to_history(params.scaled(2.0), res.metrics)
        assert rep.n_over == 40 and rep.share_underpaid == 0
