"""Calibrating the capitation formula on synthetic claims.

Run with ``python demos/01_calibration.py``.
"""

# %% Generate a bundle with known parameters and a little cost noise
import numpy as np

from capitation.calibration import build_design, fit, robustness_harness
from capitation.domain import Period
from capitation.metrics import compute_metrics
from capitation.segmentation import segment
from capitation.synthgen import GeneratorSpec, generate

spec = GeneratorSpec(n_health_centers=120, population_scale=0.01, cost_noise_sd=0.05, seed=3)
bundle, truth = generate(spec)
print(f"{len(bundle.facilities)} facilities, {len(bundle.members)} members, {len(bundle.visits)} visits")
print("planted A_low, A_med, A_high, B:", truth.vector)

# %% Facility metrics over the calibration year
period = Period.parse(truth.calibration_period)
result = compute_metrics(bundle, period)
frame = result.report_frame()
print(frame[["facility_id", "M", "phc_utilization_rate", "capture_ratio", "inflow"]].head())

# %% Tiers from utilization, capture groups from the capture ratio
seg = segment(result.metrics)
print("tier boundaries:", seg.tier_boundaries)
print("median U per capture group:", {g: round(u, 3) for g, u in seg.group_median_u.items()})

# %% Fit the formula with each estimator
rows = build_design(result.metrics, seg)
for method in ("ols", "huber", "ransac", "theilsen"):
    p = fit(rows, method, seed=1, period=period.label, segmentation=seg)
    print(f"{method:>8}: {np.round(p.vector, 1)}  max rel err {np.max(np.abs(p.vector / truth.vector - 1)):.3f}")

# %% Stability over repeated 80/20 splits
rep = robustness_harness(rows, n_splits=200, seed=1)
print(rep.summary().round(2))
print("mean over/under-paid test facilities:", rep.test_over.mean(), rep.test_under.mean())
