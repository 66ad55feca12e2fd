"""Quarterly payments, reconciliation and carried adjustments.

Run with ``python demos/02_payments.py``.
"""

# %% Calibrate on one fiscal year of stationary data
from capitation.calibration import build_design, fit_ols
from capitation.domain import Period
from capitation.metrics import compute_metrics
from capitation.payment import PaymentLedger, lines_frame, quarter_inputs, quarterly_schedule, results_frame
from capitation.segmentation import segment
from capitation.synthgen import GeneratorSpec, UtilizationShift, generate, perturb

spec = GeneratorSpec(n_health_centers=30, population_scale=0.01, stationary=True,
                     calibration_period="2022-07:2023-06")
bundle, _ = generate(spec)
prior = Period.parse("FY2023")
res = compute_metrics(bundle, prior)
seg = segment(res.metrics)
params = fit_ols(build_design(res.metrics, seg), prior.label, seg)
print("fitted:", params.vector.round(1))

# %% Schedule the next fiscal year from the same quarters one year earlier
fy = Period.parse("FY2024")
lines, _ = quarterly_schedule(params, bundle, fy)
print(lines_frame(lines).pivot(index="facility_id", columns="quarter", values="base_amount").head())

# %% A utilization surge in one quarter pushes some facilities past the 30% band
shocked = perturb(bundle, UtilizationShift(1.8, "2024-Q1"), seed=1)
ledger = PaymentLedger(lines, split=2)
for q in fy.quarters():
    actual, _ = quarter_inputs(params, shocked, q, fy)
    ledger.reconcile(params, actual, q.label)
table = results_frame(ledger.results)
print(table.loc[table.triggered == "true"].head())

# %% Deltas land on later quarters, split in two
final = lines_frame(ledger.lines())
print(final.loc[final.carried_adjustment != 0].head())
pending = ledger.pending()
print(f"{len(pending)} adjustments pending beyond the schedule, total {sum(pending.values())}")
print("base", final.base_amount.sum(), "+ deltas", ledger.triggered_total(),
      "= final", final.final_amount.sum(), "+ pending", sum(pending.values()))
