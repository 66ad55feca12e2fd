"""Seeded synthetic claims with planted capitation parameters.

Every random draw comes from :class:`~capitation.rng.CounterRNG` streams
labelled by purpose, so a spec and its seed fully determine the bundle.

The generator measures its own visit counts on the calibration period,
tiers and groups the Health Centers, and then sets each Health Center's
cost total so that the annualized cost equals
``a_tier * U * M + b * I`` (times ``1 + noise`` when cost noise is on).
The totals are split exactly, in cents, over the cost-bearing visits and
each visit is itemized so that its net cost reproduces its share.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .config import coerce, parse_pairs
from .domain import (
    CapitationError,
    CostKind,
    DiagnosisCategory,
    FacilityKind,
    MemberStatus,
    Period,
    Scheme,
    parse_month,
)
from .ingest import DatasetBundle
from .metrics import health_center_groups
from .rng import CounterRNG

CATEGORIES = [c.value for c in DiagnosisCategory]


class InfeasibleSpec(CapitationError):
    pass


class UnknownScenario(CapitationError):
    pass


# (code, unit cost RWF, quantity, weight); the two amoxicillin codes share one weight slot
TOP_ANTIBIOTICS = [
    ("AMX250C", 15, 15, None),
    ("AMX125S", 700, 1, None),
    ("CTX480T", 10, 10, 0.14),
    ("MTZ250T", 5, 15, 0.12),
    ("CIP500T", 30, 10, 0.08),
    ("DOX100C", 20, 10, 0.06),
    ("PEN250T", 25, 12, 0.06),
    ("ERY250T", 40, 10, 0.06),
]
AMOX_WEIGHT = 0.30
ANTIHISTAMINES = [("CPM4T", 5, 10), ("PRM5S", 300, 1)]
LAB_TESTS = [("LABMRDT", 300), ("LABSTOOL", 200), ("LABURINE", 150)]
OTHER_DRUGS = [("PCM500T", 2, 10), ("ORS", 60, 2), ("IBU200T", 5, 10), ("ZNC20T", 10, 10)]
CONSULT = "CONSULT"
AMBULANCE = "AMBUL"
NON_PHC = "CSECTION"
NON_PHC_COST = 50_000  # RWF


def _default_abx_rates():
    return {"UpperRespiratory": 0.70, "LowerRespiratory": 0.85, "Gastrointestinal": 0.60,
            "Wound": 0.65, "Skin": 0.40, "Other": 0.35}


def _default_ah_rates():
    return {"UpperRespiratory": 0.40, "LowerRespiratory": 0.20, "Gastrointestinal": 0.10,
            "Wound": 0.05, "Skin": 0.35, "Other": 0.10}


def _default_category_weights():
    return {"UpperRespiratory": 0.35, "LowerRespiratory": 0.10, "Gastrointestinal": 0.20,
            "Wound": 0.10, "Skin": 0.10, "Other": 0.15}


@dataclass(frozen=True)
class GeneratorSpec:
    seed: int = 42
    n_health_centers: int = 100
    n_districts: int = 0  # 0 means one district per 12 Health Centers
    n_provinces: int = 5
    start_month: str = "2022-07"
    end_month: str = "2024-06"
    calibration_period: str = "2023"
    stationary: bool = False
    seasonality: tuple = (1.0, 1.0, 1.0, 1.0)

    population_scale: float = 0.02
    min_members: int = 50
    catchment_median: float = 20209.0
    catchment_log_sd: float = 0.426
    utilization_median: float = 1.57
    utilization_log_sd: float = 0.204
    capture_median: float = 0.43
    capture_logit_sd: float = 0.614
    capture_min: float = 0.05
    capture_max: float = 0.95
    district_outflow_share: float = 0.6
    managed_hp_mean: float = 1.0
    managed_hp_share: float = 0.2
    private_hp_per_district: int = 2
    medicalized_fraction: float = 0.1
    non_phc_share: float = 0.02
    unapproved_share: float = 0.03
    other_scheme_share: float = 0.03
    inactive_share: float = 0.05
    pending_share: float = 0.10

    a_low: float = 912.0
    a_med: float = 1278.0
    a_high: float = 1562.0
    b: float = 1126.0
    cost_noise_sd: float = 0.0
    visit_noise_sd: float = 0.0

    copay: int = 200  # RWF per visit
    ambulance_rate: float = 0.01
    ambulance_copay_rate: float = 0.10
    copay_error_share: float = 0.3
    referral_rate: float = 0.05
    admission_rate: float = 0.02

    pediatric_fraction: float = 0.35
    category_weights: dict = field(default_factory=_default_category_weights)
    category_count_weights: tuple = (0.75, 0.20, 0.05)
    abx_rates: dict = field(default_factory=_default_abx_rates)
    adult_abx_rate: float = 0.35
    antihistamine_rates: dict = field(default_factory=_default_ah_rates)
    lab_rate: float = 0.4
    other_drug_rate: float = 0.5
    top8_mass: float = 0.82
    n_tail_antibiotics: int = 31
    syrup_share_low: float = 0.2
    syrup_share_high: float = 0.8

    def replace(self, **changes) -> "GeneratorSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_text(cls, text: str) -> "GeneratorSpec":
        return cls(**coerce(cls, parse_pairs(text)))

    @classmethod
    def from_file(cls, path) -> "GeneratorSpec":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def check(self) -> None:
        probs = ["capture_median", "capture_min", "capture_max", "district_outflow_share", "managed_hp_share",
                 "medicalized_fraction", "non_phc_share", "unapproved_share", "other_scheme_share",
                 "inactive_share", "pending_share", "ambulance_rate", "ambulance_copay_rate",
                 "copay_error_share", "referral_rate", "admission_rate", "pediatric_fraction",
                 "adult_abx_rate", "lab_rate", "other_drug_rate", "top8_mass", "syrup_share_low",
                 "syrup_share_high"]
        for name in probs:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InfeasibleSpec(f"{name} = {v} is not a probability")
        for name, rates in (("abx_rates", self.abx_rates), ("antihistamine_rates", self.antihistamine_rates)):
            if set(rates) != set(CATEGORIES) or not all(0.0 <= r <= 1.0 for r in rates.values()):
                raise InfeasibleSpec(f"{name} needs a probability for each of {CATEGORIES}")
        if set(self.category_weights) != set(CATEGORIES) or min(self.category_weights.values()) < 0:
            raise InfeasibleSpec("category_weights needs a non-negative weight per category")
        if not 0.0 < self.capture_median < 1.0 or self.capture_min > self.capture_max:
            raise InfeasibleSpec("capture ratios must lie strictly between 0 and 1")
        if min(self.a_low, self.a_med, self.a_high, self.b) <= 0:
            raise InfeasibleSpec("planted parameters must be positive")
        if self.n_health_centers < 15:
            raise InfeasibleSpec("at least 15 Health Centers are needed for segmentation")
        if len(self.seasonality) != 4 or min(self.seasonality) <= 0:
            raise InfeasibleSpec("seasonality needs four positive quarter multipliers")
        if len(self.category_count_weights) != 3:
            raise InfeasibleSpec("category_count_weights needs weights for 1, 2 and 3 categories")
        if self.population_scale <= 0 or self.utilization_median <= 0:
            raise InfeasibleSpec("population scale and utilization must be positive")
        if min(self.cost_noise_sd, self.visit_noise_sd) < 0:
            raise InfeasibleSpec("noise SDs must be non-negative")
        tail_max = (1 - self.top8_mass) / max(self.n_tail_antibiotics, 1) * 2
        top_min = min(AMOX_WEIGHT * min(self.syrup_share_low, 1 - self.syrup_share_high),
                      min(w for *_, w in TOP_ANTIBIOTICS if w)) * self.top8_mass / 0.82
        if self.n_tail_antibiotics < 1 or tail_max >= top_min:
            raise InfeasibleSpec("tail antibiotics would rival the top eight")
        start, end = parse_month(self.start_month), parse_month(self.end_month)
        if end < start:
            raise InfeasibleSpec("start_month is after end_month")
        cal = Period.parse(self.calibration_period)
        if cal.start < start or cal.end > end:
            raise InfeasibleSpec("calibration period lies outside the generated span")
        if self.stationary and (start % 3 or (end - start + 1) % 3):
            raise InfeasibleSpec("stationary data needs a span of whole calendar quarters")


@dataclass
class GroundTruth:
    """Everything planted by :func:`generate`, for oracle comparisons."""

    spec: dict
    params: dict
    calibration_period: str
    facilities: pd.DataFrame  # one row per Health Center
    group_median_u: dict
    abx_catalog: pd.DataFrame
    top8_codes: list
    abx_dropped: int = 0

    @property
    def vector(self) -> np.ndarray:
        p = self.params
        return np.array([p["a_low"], p["a_med"], p["a_high"], p["b"]])

    def to_json(self) -> str:
        fac = self.facilities.copy()
        return json.dumps({
            "spec": self.spec,
            "params": self.params,
            "calibration_period": self.calibration_period,
            "group_median_u": {str(k): v for k, v in self.group_median_u.items()},
            "top8_codes": self.top8_codes,
            "abx_dropped": self.abx_dropped,
            "facilities": fac.to_dict(orient="records"),
            "abx_catalog": self.abx_catalog.to_dict(orient="records"),
        }, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _segments(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start offsets and owner index for a concatenation of ``counts`` blocks."""
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    owner = np.repeat(np.arange(len(counts)), counts)
    return starts, owner


def _pick(starts: np.ndarray, counts: np.ndarray, owner: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Uniform element of block ``owner`` for each ``u``."""
    return starts[owner] + np.minimum(np.floor(u * counts[owner]).astype(np.int64), counts[owner] - 1)


def _equal_groups(values: np.ndarray, ids: list, k: int) -> np.ndarray:
    order = sorted(range(len(values)), key=lambda i: (values[i], ids[i]))
    base, extra = divmod(len(values), k)
    out = np.empty(len(values), dtype=np.int64)
    pos = 0
    for g in range(k):
        size = base + (1 if g < extra else 0)
        for i in order[pos:pos + size]:
            out[i] = g
        pos += size
    return out


def _month_dates(months: np.ndarray, days: np.ndarray) -> np.ndarray:
    first = months.astype("datetime64[M]").astype("datetime64[D]")
    return (first + days.astype("timedelta64[D]")).astype("datetime64[ns]")


def _days_in_month(months: np.ndarray) -> np.ndarray:
    m = months.astype("datetime64[M]")
    return ((m + 1).astype("datetime64[D]") - m.astype("datetime64[D]")).astype(np.int64)


def antibiotic_catalog(spec: GeneratorSpec) -> pd.DataFrame:
    """Codes, unit costs (RWF), quantities and base weights of all antibiotics."""
    scale = spec.top8_mass / 0.82
    rows = [(code, cost, qty, (w or 0.0) * scale, True) for code, cost, qty, w in TOP_ANTIBIOTICS]
    n = spec.n_tail_antibiotics
    raw = 1.0 + 0.5 * np.cos(np.arange(n))  # mildly uneven tail
    tail = raw / raw.sum() * (1 - spec.top8_mass)
    for k in range(n):
        rows.append((f"ABX{k + 1:03d}", 50 + (37 * k) % 350, 1, float(tail[k]), False))
    return pd.DataFrame(rows, columns=["item_code", "unit_cost", "quantity", "weight", "top8"])


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _facilities(spec: GeneratorSpec, rng: CounterRNG, start: int, end: int):
    n = spec.n_health_centers
    nd = spec.n_districts or max(1, math.ceil(n / 12))
    hc_ids = [f"HC{i + 1:04d}" for i in range(n)]
    district = rng.spawn("district").permutation(n) % nd
    province = district % spec.n_provinces
    medicalized = rng.spawn("medicalized").bernoulli(spec.medicalized_fraction, n)
    n_hp = np.minimum(rng.spawn("managed").poisson(np.full(n, spec.managed_hp_mean)), 3)

    rows = []
    for i in range(n):
        rows.append((hc_ids[i], FacilityKind.HEALTH_CENTER.value, bool(medicalized[i]), "", f"C{i + 1:04d}",
                     f"D{district[i] + 1:03d}", f"P{province[i] + 1}", start, end))
    hp_parent = np.repeat(np.arange(n), n_hp)
    for j, p in enumerate(hp_parent):
        rows.append((f"PH{j + 1:05d}", FacilityKind.PUBLIC_HEALTH_POST.value, False, hc_ids[p], "",
                     f"D{district[p] + 1:03d}", f"P{province[p] + 1}", start, end))
    priv_district = np.repeat(np.arange(nd), spec.private_hp_per_district)
    for j, d in enumerate(priv_district):
        rows.append((f"PV{j + 1:05d}", FacilityKind.PRIVATE_HEALTH_POST.value, False, "", "",
                     f"D{d + 1:03d}", f"P{d % spec.n_provinces + 1}", start, end))
    fac = pd.DataFrame(rows, columns=["facility_id", "kind", "medicalized", "parent_hc_id", "catchment_id",
                                      "district_id", "province_id", "first_active_month", "last_active_month"])
    return fac, district, medicalized, n_hp, hp_parent, priv_district, nd


def _members(spec: GeneratorSpec, rng: CounterRNG, n_cbhi: np.ndarray, n_other: np.ndarray, start: int, end: int):
    n = len(n_cbhi)
    per = n_cbhi + n_other
    starts, owner = _segments(per)
    total = int(per.sum())
    local = np.arange(total) - starts[owner]
    cbhi = local < n_cbhi[owner]

    r = rng.spawn("members")
    u = r.uniform(total)
    status = np.where(u < spec.inactive_share, MemberStatus.INACTIVE.value,
                      np.where(u < spec.inactive_share + spec.pending_share, MemberStatus.PENDING.value,
                               MemberStatus.ACTIVE.value))
    status[~cbhi] = MemberStatus.ACTIVE.value
    y0, y1 = start // 12 + 1970, end // 12 + 1970
    pending_year = (y0 + y1) // 2
    half = r.bernoulli(0.5, total)
    pending_date = np.where(half, np.datetime64(f"{pending_year}-07-01"), np.datetime64(f"{pending_year}-01-01"))
    month = start + r.integers(0, end - start + 1, total)
    day = r.integers(1, 28, total)  # days 2..28 never fall on a semester start
    other_date = _month_dates(month, day).astype("datetime64[D]")
    last = np.where(status == MemberStatus.PENDING.value, pending_date.astype("datetime64[D]"), other_date)

    members = pd.DataFrame({
        "member_id": [f"M{k + 1:08d}" for k in range(total)],
        "household_id": [f"H{c + 1:04d}-{l // 5:05d}" for c, l in zip(owner, local)],
        "catchment_id": [f"C{c + 1:04d}" for c in owner],
        "status": status,
        "last_updated": last.astype("datetime64[ns]"),
        "scheme": np.where(cbhi, Scheme.CBHI.value, Scheme.OTHER.value),
    })
    active = cbhi & (status != MemberStatus.INACTIVE.value)
    m_active = np.bincount(owner[active], minlength=n)
    return members, starts, m_active


_OWN_HC, _OWN_HP, _OUT_HC, _OUT_PRIV, _OTHER_SCHEME, _UNAPPROVED = range(6)


def _visit_counts(spec, rng, months, lam_member, capture, has_hp, has_priv, other_members, util):
    """Poisson counts per (Health Center, month, visit type)."""
    n = len(capture)
    season = np.asarray(spec.seasonality)[(months % 12) // 3]
    base = lam_member[:, None] * season[None, :] / 12.0
    hp_share = np.where(has_hp, spec.managed_hp_share, 0.0)[:, None]
    priv_share = np.where(has_priv, 1 - spec.district_outflow_share, 0.0)[:, None]
    own = base * capture[:, None]
    out = base * (1 - capture[:, None])
    lam = np.stack([
        own * (1 - hp_share),
        own * hp_share,
        out * (1 - priv_share),
        out * priv_share,
        (other_members * util)[:, None] * season[None, :] / 12.0,
        base * spec.unapproved_share,
    ], axis=2)
    return rng.poisson(lam).reshape(n, len(months), 6)


def generate(spec: Optional[GeneratorSpec] = None) -> tuple[DatasetBundle, GroundTruth]:
    """Build a synthetic bundle and its planted ground truth."""
    spec = spec or GeneratorSpec()
    spec.check()
    rng = CounterRNG(spec.seed, "synthgen")
    start, end = parse_month(spec.start_month), parse_month(spec.end_month)
    n = spec.n_health_centers
    hc_ids = [f"HC{i + 1:04d}" for i in range(n)]

    fac, district, medicalized, n_hp, hp_parent, priv_district, nd = _facilities(spec, rng, start, end)
    n_hp_total = len(hp_parent)
    hp_base = n  # facility row offsets
    priv_base = n + n_hp_total

    # catchments
    r = rng.spawn("catchment")
    size = r.lognormal(spec.catchment_median, spec.catchment_log_sd, n)
    util = r.lognormal(spec.utilization_median, spec.utilization_log_sd, n)
    z = r.normal(n)
    logit = math.log(spec.capture_median / (1 - spec.capture_median)) + spec.capture_logit_sd * z
    capture = np.clip(1 / (1 + np.exp(-logit)), spec.capture_min, spec.capture_max)
    n_cbhi = np.maximum(spec.min_members, np.floor(size * spec.population_scale + 0.5)).astype(np.int64)
    n_other = np.floor(n_cbhi * spec.other_scheme_share + 0.5).astype(np.int64)
    members, member_starts, m_active = _members(spec, rng, n_cbhi, n_other, start, end)

    # visit counts; stationary data repeats the first quarter
    all_months = np.arange(start, end + 1)
    gen_months = all_months[:3] if spec.stationary else all_months
    hp_starts, _ = _segments(n_hp)
    priv_counts = np.bincount(priv_district, minlength=nd)
    priv_starts, _ = _segments(priv_counts)
    counts = _visit_counts(spec, rng.spawn("counts"), gen_months, util * m_active, capture, n_hp > 0,
                           priv_counts[district] > 0, n_other, util)
    flat = counts.reshape(-1)
    cell = np.repeat(np.arange(flat.size), flat)
    src = cell // (len(gen_months) * 6)
    month = gen_months[(cell // 6) % len(gen_months)]
    vtype = cell % 6

    rv = rng.spawn("visits")
    nv = len(cell)
    u_dest, u_mem, u_day = rv.uniform(nv), rv.uniform(nv), rv.uniform(nv)
    dest = src.copy()
    sel = vtype == _OWN_HP
    dest[sel] = hp_base + _pick(hp_starts, n_hp, src[sel], u_dest[sel])
    sel = vtype == _OUT_PRIV
    dest[sel] = priv_base + _pick(priv_starts, priv_counts, district[src[sel]], u_dest[sel])
    # another Health Center of the same district, or of any district when alone
    by_district = np.lexsort((np.arange(n), district))
    d_counts = np.bincount(district, minlength=nd)
    d_starts, _ = _segments(d_counts)
    pos_in_d = np.empty(n, dtype=np.int64)
    pos_in_d[by_district] = np.arange(n) - d_starts[district[by_district]]
    sel = np.flatnonzero(vtype == _OUT_HC)
    s = src[sel]
    alone = d_counts[district[s]] == 1
    k = np.floor(u_dest[sel] * np.where(alone, n - 1, d_counts[district[s]] - 1)).astype(np.int64)
    k_local = k + (k >= pos_in_d[s])
    k_global = k + (k >= s)
    dest[sel] = np.where(alone, k_global, by_district[d_starts[district[s]] + np.minimum(k_local, d_counts[district[s]] - 1)])

    cbhi_visit = vtype != _OTHER_SCHEME
    member = np.where(
        cbhi_visit,
        member_starts[src] + np.minimum(np.floor(u_mem * n_cbhi[src]).astype(np.int64), n_cbhi[src] - 1),
        member_starts[src] + n_cbhi[src] + np.minimum(np.floor(u_mem * np.maximum(n_other[src], 1)).astype(np.int64),
                                                      np.maximum(n_other[src] - 1, 0)),
    )
    approved = vtype != _UNAPPROVED
    day = np.floor(u_day * _days_in_month(month)).astype(np.int64)

    if spec.stationary:
        reps = len(all_months) // 3
        tile = np.repeat(np.arange(reps), nv)
        src, dest, vtype, member, approved, day = (np.tile(a, reps) for a in (src, dest, vtype, member, approved, day))
        month = np.tile(month, reps) + 3 * tile
        cbhi_visit = np.tile(cbhi_visit, reps)
        day = np.minimum(day, _days_in_month(month) - 1)
        nv = len(src)

    fac_group = np.concatenate([np.arange(n), hp_parent, np.full(len(priv_district), -1)])
    group = fac_group[dest]
    medic_fac = np.concatenate([medicalized, np.zeros(n_hp_total + len(priv_district), bool)])

    # clinical attributes
    rc = rng.spawn("clinical")
    pediatric = rc.bernoulli(spec.pediatric_fraction, nv)
    age = np.where(pediatric, rc.integers(0, 15, nv), rc.integers(15, 80, nv))
    ncat = 1 + rc.choice(spec.category_count_weights, nv)
    w = np.array([spec.category_weights[c] for c in CATEGORIES])
    keys = np.log(rc.uniform((nv, len(CATEGORIES))) + 1e-300) / np.where(w > 0, w, 1e-300)
    ranked = np.argsort(-keys, axis=1, kind="stable")
    chosen = np.zeros((nv, len(CATEGORIES)), dtype=bool)
    for j in range(3):
        rows = np.flatnonzero(ncat > j)
        chosen[rows, ranked[rows, j]] = True
    non_phc = medic_fac[dest] & (fac_group[dest] >= 0) & rc.bernoulli(spec.non_phc_share, nv) & approved
    referred = rc.bernoulli(spec.referral_rate, nv)
    admitted = rc.bernoulli(spec.admission_rate, nv)
    stay = rc.integers(1, 6, nv)

    abx_p = np.array([spec.abx_rates[c] for c in CATEGORIES])
    ah_p = np.array([spec.antihistamine_rates[c] for c in CATEGORIES])
    p_abx = np.where(pediatric, np.where(chosen, abx_p, 0).max(axis=1), spec.adult_abx_rate)
    p_ah = np.where(chosen, ah_p, 0).max(axis=1)
    has_abx = rc.uniform(nv) < p_abx
    has_ah = rc.uniform(nv) < p_ah
    has_lab = rc.bernoulli(spec.lab_rate, nv)
    has_other = rc.bernoulli(spec.other_drug_rate, nv)
    has_amb = rc.bernoulli(spec.ambulance_rate, nv) & approved

    # ---- generator-side metrics on the calibration period ----
    cal = Period.parse(spec.calibration_period)
    in_cal = (month >= cal.start) & (month <= cal.end)
    counted = approved & cbhi_visit & in_cal
    at_hc = counted & (group >= 0)
    own_n = np.bincount(group[at_hc & (group == src)], minlength=n)
    inflow_n = np.bincount(group[at_hc & (group != src)], minlength=n)
    member_n = np.bincount(src[counted], minlength=n)
    active_cells = np.unique(group[at_hc] * 12 + (month[at_hc] - cal.start))
    months_n = np.bincount(active_cells // 12, minlength=n)
    if (months_n == 0).any() or (m_active == 0).any():
        raise InfeasibleSpec("some Health Centers have no activity or members in the calibration period")
    u_real = own_n * 12 / months_n / m_active
    phc_real = member_n * 12 / months_n / m_active
    capture_real = np.divide(own_n, member_n, out=np.zeros(n), where=member_n > 0)
    inflow_real = inflow_n * 12 / months_n
    tier = _equal_groups(phc_real, hc_ids, 3)
    cgroup = _equal_groups(capture_real, hc_ids, 5)
    group_u = {g + 1: float(np.median(u_real[cgroup == g])) for g in range(5)}
    U = np.array([group_u[g + 1] for g in cgroup])
    a = np.array([spec.a_low, spec.a_med, spec.a_high])[tier]
    planted = a * U * m_active + spec.b * inflow_real
    noise = np.maximum(spec.cost_noise_sd * rng.spawn("cost_noise").normal(n), -0.5)
    target = planted * (1 + noise)
    cost_cents = np.floor(target * 100 * months_n / 12 + 0.5).astype(np.int64)

    # ---- per-visit net cost (cents) ----
    weight = 1.0 + spec.visit_noise_sd * rng.spawn("visit_noise").normal(nv)
    weight = np.maximum(weight, 0.25)
    bearing = approved & cbhi_visit & (group >= 0) & ~non_phc
    net = np.zeros(nv, dtype=np.int64)
    idx = np.flatnonzero(bearing & in_cal)
    g = group[idx]
    order = np.lexsort((idx, g))
    idx, g = idx[order], g[order]
    cw = np.cumsum(weight[idx])
    g_start = np.searchsorted(g, np.arange(n))
    g_end = np.searchsorted(g, np.arange(n), side="right")
    if (g_end == g_start).any():
        raise InfeasibleSpec("a Health Center has no cost-bearing visits in the calibration period")
    before = np.concatenate([[0.0], cw])[g_start]
    local_cw = cw - before[g]
    total_w = local_cw[g_end - 1]
    cum = np.floor(cost_cents[g] * (local_cw / total_w[g])).astype(np.int64)
    cum[g_end - 1] = cost_cents  # exact closure
    prev = np.concatenate([[0], cum[:-1]])
    prev[g_start] = 0
    net[idx] = cum - prev
    per_visit = cost_cents / (g_end - g_start)
    fallback = float(np.median(per_visit))
    rest = np.flatnonzero(~(bearing & in_cal))
    mean_cost = np.where(group[rest] >= 0, per_visit[np.maximum(group[rest], 0)], fallback)
    net[rest] = np.floor(mean_cost * weight[rest] + 0.5).astype(np.int64)

    # ---- itemization ----
    catalog = antibiotic_catalog(spec)
    hc_rank = np.argsort(np.lexsort((np.array(hc_ids), per_visit)), kind="stable") / max(n - 1, 1)
    syrup_share = spec.syrup_share_low + (spec.syrup_share_high - spec.syrup_share_low) * hc_rank
    visit_hc = np.where(group >= 0, group, src)
    ri = rng.spawn("items")
    abx_code = _draw_antibiotics(ri, catalog, syrup_share[visit_hc], spec.top8_mass)
    abx_cost = (catalog.unit_cost.to_numpy() * catalog.quantity.to_numpy() * 100)[abx_code]
    ah_code = ri.integers(0, len(ANTIHISTAMINES), nv)
    ah_cost = np.array([c * q * 100 for _, c, q in ANTIHISTAMINES])[ah_code]
    lab_code = ri.integers(0, len(LAB_TESTS), nv)
    lab_qty = ri.integers(1, 3, nv)
    lab_cost = np.array([c * 100 for _, c in LAB_TESTS])[lab_code] * lab_qty
    od_code = ri.integers(0, len(OTHER_DRUGS), nv)
    od_cost = np.array([c * q * 100 for _, c, q in OTHER_DRUGS])[od_code]
    amb_cost = ri.integers(5, 21, nv) * 1000 * 100
    copay_error = ri.bernoulli(spec.copay_error_share, nv)
    u_err = ri.uniform(nv)

    base_copay = np.where(approved, spec.copay * 100, 0)
    amb_cost = np.where(has_amb, amb_cost, 0)
    est = np.floor(amb_cost * spec.ambulance_copay_rate + 0.5).astype(np.int64)
    recorded = np.where(has_amb & copay_error, np.floor(est * u_err).astype(np.int64), base_copay + est)
    deducted = recorded - np.minimum(recorded, est)
    extra = np.where(non_phc, NON_PHC_COST * 100, 0)
    gross = net + deducted + extra

    # optional items are dropped, cheapest priority first, until the consult remainder is non-negative
    opt = [has_other.copy(), has_lab.copy(), has_ah.copy(), has_abx.copy()]
    costs = [od_cost, lab_cost, ah_cost, abx_cost]
    for k in range(len(opt)):
        spent = extra + sum(np.where(o, c, 0) for o, c in zip(opt, costs))
        over = gross - spent < 0
        if not over.any():
            break
        opt[k] &= ~over
    has_other, has_lab, has_ah, has_abx_final = opt
    abx_dropped = int((has_abx & ~has_abx_final & pediatric & (ncat == 1)).sum())
    consult = gross - extra - sum(np.where(o, c, 0) for o, c in zip(opt, costs))

    # ---- assemble frames ----
    order = np.lexsort((day, dest, month))
    vid = np.empty(nv, dtype=object)
    vid[order] = [f"V{k + 1:08d}" for k in range(nv)]
    dates = _month_dates(month, day)
    adm = np.where(admitted, dates, np.datetime64("NaT"))
    dis = np.where(admitted, dates + stay.astype("timedelta64[D]").astype("timedelta64[ns]"), np.datetime64("NaT"))
    cat_arr = np.array(CATEGORIES)
    cat_text = ["|".join(sorted(cat_arr[row])) for row in chosen]
    facility_ids = fac.facility_id.to_numpy()
    visits = pd.DataFrame({
        "visit_id": vid,
        "facility_id": facility_ids[dest],
        "member_id": members.member_id.to_numpy()[member],
        "visit_date": dates,
        "approved": approved,
        "patient_age_years": age,
        "diagnosis_categories": cat_text,
        "referred": referred,
        "admitted": admitted,
        "admission_date": adm.astype("datetime64[ns]"),
        "discharge_date": dis.astype("datetime64[ns]"),
        "recorded_copay_total": recorded,
    })

    abx_codes = catalog.item_code.to_numpy()
    abx_qty = catalog.quantity.to_numpy()
    abx_unit = catalog.unit_cost.to_numpy() * 100
    parts = [
        (np.ones(nv, bool), CostKind.SERVICE.value, np.full(nv, CONSULT, object), np.ones(nv, np.int64), consult),
        (has_abx_final, CostKind.DRUG.value, abx_codes[abx_code], abx_qty[abx_code], abx_unit[abx_code]),
        (has_ah, CostKind.DRUG.value, np.array([c for c, *_ in ANTIHISTAMINES], object)[ah_code],
         np.array([q for *_, q in ANTIHISTAMINES])[ah_code], np.array([c * 100 for _, c, _ in ANTIHISTAMINES])[ah_code]),
        (has_lab, CostKind.SERVICE.value, np.array([c for c, _ in LAB_TESTS], object)[lab_code], lab_qty,
         np.array([c * 100 for _, c in LAB_TESTS])[lab_code]),
        (has_other, CostKind.DRUG.value, np.array([c for c, *_ in OTHER_DRUGS], object)[od_code],
         np.array([q for *_, q in OTHER_DRUGS])[od_code], np.array([c * 100 for _, c, _ in OTHER_DRUGS])[od_code]),
        (non_phc, CostKind.SERVICE.value, np.full(nv, NON_PHC, object), np.ones(nv, np.int64),
         np.full(nv, NON_PHC_COST * 100)),
        (has_amb, CostKind.AMBULANCE.value, np.full(nv, AMBULANCE, object), np.ones(nv, np.int64), amb_cost),
    ]
    item_frames = []
    for k, (mask, kind, code, qty, unit) in enumerate(parts):
        sel = np.flatnonzero(mask)
        item_frames.append(pd.DataFrame({"visit_id": vid[sel], "kind": kind, "item_code": code[sel],
                                         "quantity": qty[sel].astype(np.int64),
                                         "unit_cost": unit[sel].astype(np.int64), "_order": k}))
    items = pd.concat(item_frames, ignore_index=True).sort_values(["visit_id", "_order"], kind="stable")
    items = items.drop(columns="_order")

    code_rows = [(CONSULT, False, False, False, False), (AMBULANCE, False, False, False, False),
                 (NON_PHC, False, False, True, False)]
    code_rows += [(c, True, False, False, False) for c in abx_codes]
    code_rows += [(c, False, True, False, False) for c, *_ in ANTIHISTAMINES]
    code_rows += [(c, False, False, False, True) for c, _ in LAB_TESTS]
    code_rows += [(c, False, False, False, False) for c, *_ in OTHER_DRUGS]
    code_map = pd.DataFrame(code_rows, columns=["item_code", "is_antibiotic", "is_antihistamine", "is_non_phc",
                                                "is_lab_test"])

    bundle = DatasetBundle.from_frames(fac, members, visits, items, code_map)

    truth_fac = pd.DataFrame({
        "facility_id": hc_ids,
        "catchment_id": [f"C{i + 1:04d}" for i in range(n)],
        "district_id": [f"D{d + 1:03d}" for d in district],
        "catchment_size": size,
        "members": n_cbhi,
        "active_members": m_active,
        "utilization_target": util,
        "capture_target": capture,
        "months_active": months_n,
        "own_visits": own_n,
        "inflow_visits": inflow_n,
        "member_visits": member_n,
        "u": u_real,
        "phc_utilization_rate": phc_real,
        "capture_ratio": capture_real,
        "inflow": inflow_real,
        "tier": np.array(["Low", "Medium", "High"])[tier],
        "capture_group": cgroup + 1,
        "U": U,
        "planted_cost": planted,
        "cost_noise": noise,
        "cost_cents": cost_cents,
        "cost_per_visit_cents": per_visit,
        "syrup_share": syrup_share,
    })
    truth = GroundTruth(
        spec={k: (list(v) if isinstance(v, tuple) else v) for k, v in spec.to_dict().items()},
        params={"a_low": spec.a_low, "a_med": spec.a_med, "a_high": spec.a_high, "b": spec.b},
        calibration_period=cal.label,
        facilities=truth_fac,
        group_median_u=group_u,
        abx_catalog=catalog,
        top8_codes=[c for c, *_ in TOP_ANTIBIOTICS],
        abx_dropped=abx_dropped,
    )
    return bundle, truth


def _draw_antibiotics(rng: CounterRNG, catalog: pd.DataFrame, syrup_share: np.ndarray, top8_mass: float) -> np.ndarray:
    """Catalog row per visit; the amoxicillin slot splits by the facility's syrup share."""
    nv = len(syrup_share)
    w = catalog.weight.to_numpy().copy()
    amox = AMOX_WEIGHT * top8_mass / 0.82
    w[0] = amox  # placeholder slot for both amoxicillin codes
    w[1] = 0.0
    idx = rng.choice(w, nv)
    syrup = rng.uniform(nv) < syrup_share
    return np.where((idx == 0) & syrup, 1, idx)


# ---------------------------------------------------------------------------
# perturbation scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UtilizationShift:
    """Scale own-catchment visit counts in one quarter."""

    factor: float
    quarter: str
    facility_ids: Optional[tuple] = None


@dataclass(frozen=True)
class InflowShift:
    """Scale visits from other catchments in one quarter."""

    factor: float
    quarter: str
    facility_ids: Optional[tuple] = None


@dataclass(frozen=True)
class CostOutliers:
    """Multiply every cost of a fraction of Health Centers."""

    fraction: float
    multiplier: float


def outlier_count(fraction: float, n: int) -> int:
    return int(math.ceil(round(fraction * n, 9)))


def _resample(bundle: DatasetBundle, mask: np.ndarray, factor: float, seed: int, label: str) -> DatasetBundle:
    if factor < 0:
        raise ValueError("shift factor must be non-negative")
    vis = bundle.visits
    idx = np.flatnonzero(mask)
    whole = math.floor(factor)
    frac = factor - whole
    u = CounterRNG(seed, "perturb", label).uniform(len(idx))
    copies = np.full(len(idx), whole, dtype=np.int64) + (u < frac)
    if whole == 1 and frac == 0:
        return bundle
    keep = np.ones(len(vis), dtype=bool)
    keep[idx[copies == 0]] = False
    extra_src = np.repeat(idx, np.maximum(copies - 1, 0))
    rank = np.concatenate([np.arange(c - 1) for c in np.maximum(copies, 1)]) if len(idx) else np.array([], int)
    dup = vis.iloc[extra_src].copy()
    dup["visit_id"] = [f"{v}-{label[0]}{k + 1}" for v, k in zip(dup.visit_id, rank)]
    items = bundle.cost_items
    kept_ids = set(vis.visit_id[keep])
    item_keep = items.loc[items.visit_id.isin(kept_ids)]
    src_items = items.loc[items.visit_id.isin(set(vis.visit_id.iloc[extra_src]))]
    mapping = pd.DataFrame({"visit_id": vis.visit_id.iloc[extra_src].to_numpy(), "new_id": dup.visit_id.to_numpy()})
    new_items = src_items.merge(mapping, on="visit_id", sort=False).drop(columns="visit_id").rename(
        columns={"new_id": "visit_id"})
    return bundle.replace(
        visits=pd.concat([vis.loc[keep], dup], ignore_index=True),
        cost_items=pd.concat([item_keep, new_items[items.columns]], ignore_index=True),
    )


def _shift_mask(bundle: DatasetBundle, quarter: str, facility_ids, own: bool) -> np.ndarray:
    q = Period.parse(quarter)
    vis = bundle.visits
    month = vis.visit_date.to_numpy(dtype="datetime64[M]").astype(np.int64)
    groups = health_center_groups(bundle.facilities)
    hc = vis.facility_id.map(groups)
    fac = bundle.facilities
    catchment = pd.Series(fac.catchment_id.to_numpy(), index=fac.facility_id.to_numpy())
    mem = bundle.members
    member_catch = vis.member_id.map(pd.Series(mem.catchment_id.to_numpy(), index=mem.member_id.to_numpy()))
    is_own = (hc.map(catchment) == member_catch).to_numpy()
    mask = (month >= q.start) & (month <= q.end) & hc.notna().to_numpy() & vis.approved.to_numpy()
    mask &= is_own if own else ~is_own
    if facility_ids is not None:
        mask &= hc.isin(set(facility_ids)).to_numpy()
    return mask


def perturb(bundle: DatasetBundle, scenario, seed: int = 0) -> DatasetBundle:
    """A modified copy of ``bundle``; the input is never changed."""
    if isinstance(scenario, UtilizationShift):
        mask = _shift_mask(bundle, scenario.quarter, scenario.facility_ids, own=True)
        return _resample(bundle, mask, scenario.factor, seed, "util")
    if isinstance(scenario, InflowShift):
        mask = _shift_mask(bundle, scenario.quarter, scenario.facility_ids, own=False)
        return _resample(bundle, mask, scenario.factor, seed, "inflow")
    if isinstance(scenario, CostOutliers):
        if scenario.multiplier == 1 or scenario.fraction == 0:
            return bundle
        chosen = set(outlier_facilities(bundle, scenario, seed))
        groups = health_center_groups(bundle.facilities)
        hit = bundle.visits.facility_id.map(groups).isin(chosen).to_numpy()
        vis = bundle.visits.copy()
        vis.loc[hit, "recorded_copay_total"] = np.floor(
            vis.recorded_copay_total[hit] * scenario.multiplier + 0.5).astype(np.int64)
        items = bundle.cost_items.copy()
        hit_items = items.visit_id.isin(set(vis.visit_id[hit])).to_numpy()
        items.loc[hit_items, "unit_cost"] = np.floor(
            items.unit_cost[hit_items] * scenario.multiplier + 0.5).astype(np.int64)
        return bundle.replace(visits=vis, cost_items=items)
    raise UnknownScenario(f"unknown scenario {type(scenario).__name__}")


def outlier_facilities(bundle: DatasetBundle, scenario: CostOutliers, seed: int = 0) -> list[str]:
    fac = bundle.facilities
    hcs = np.sort(fac.facility_id[fac.kind == FacilityKind.HEALTH_CENTER.value].to_numpy())
    k = outlier_count(scenario.fraction, len(hcs))
    return sorted(hcs[CounterRNG(seed, "perturb", "outliers").sample(len(hcs), k)])
