"""Monthly indicator monitoring and pediatric antibiotic prescribing.

Run with ``python demos/03_monitoring.py``.
"""

# %% Monthly indicators per Health Center
from capitation.domain import Period
from capitation.metrics import compute_metrics
from capitation.monitoring import (
    FlagType,
    bhattacharyya_flags,
    compute_indicators,
    flags_frame,
    iqr_flags,
)
from capitation.stewardship import (
    antibiotic_shares,
    cost_group_breakdown,
    pediatric_single_category_cohort,
    prescription_rate_by_category,
)
from capitation.synthgen import CostOutliers, GeneratorSpec, generate, perturb

bundle, truth = generate(GeneratorSpec(n_health_centers=60, population_scale=0.01, seed=5))
bundle = perturb(bundle, CostOutliers(0.05, 4.0), seed=2)
period = Period.parse("2023")
ind = compute_indicators(bundle, period)
print(ind.head())

# %% IQR flags against each facility's own history and against its district
own, _ = iqr_flags(ind, FlagType.SELF_HISTORY)
district, _ = iqr_flags(ind, FlagType.DISTRICT_MONTH)
print(f"{len(own)} self-history flags, {len(district)} district flags")
print(flags_frame(district).head())

# %% Distribution shift within each province
shift, _ = bhattacharyya_flags(ind)
print(flags_frame(shift).head())

# %% Antibiotics for children with a single diagnosis category
cohort = pediatric_single_category_cohort(bundle, period=period)
print("cohort composition:", cohort.composition)
rates = prescription_rate_by_category(cohort)
print(rates.boxplots[["category", "q1", "median", "q3"]])
shares = antibiotic_shares(cohort)
print(shares[["item_code", "frequency_share", "cost_share"]])

# %% Which codes drive cost in cheap and expensive facilities
groups = cost_group_breakdown(cohort, compute_metrics(bundle, period).metrics)
print(groups.pivot(index="item_code", columns="group", values="cost_share").round(3))
