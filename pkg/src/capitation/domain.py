"""Core domain types shared by the pipeline.

Currency amounts are integer RWF cents everywhere inside the package; CSV
files and reports render RWF. Records are frozen dataclasses; bulk data is
held column-wise in pandas frames whose layouts are fixed by the ``*_COLUMNS``
constants below.
"""

from __future__ import annotations

import datetime as dt
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

import numpy as np
import pandas as pd


class CapitationError(Exception):
    """Base class for errors raised by this package."""


class DataError(CapitationError):
    """Input data cannot support the requested computation."""


class FacilityKind(str, Enum):
    HEALTH_CENTER = "HealthCenter"
    PUBLIC_HEALTH_POST = "PublicHealthPost"
    PRIVATE_HEALTH_POST = "PrivateHealthPost"


class MemberStatus(str, Enum):
    ACTIVE = "Active"
    INACTIVE = "Inactive"
    # partial or unconfirmed contribution; counted only under the semester rule
    PENDING = "Pending"


class Scheme(str, Enum):
    CBHI = "CBHI"
    OTHER = "Other"


class DiagnosisCategory(str, Enum):
    UPPER_RESPIRATORY = "UpperRespiratory"
    LOWER_RESPIRATORY = "LowerRespiratory"
    GASTROINTESTINAL = "Gastrointestinal"
    WOUND = "Wound"
    SKIN = "Skin"
    OTHER = "Other"


class CostKind(str, Enum):
    SERVICE = "Service"
    DRUG = "Drug"
    AMBULANCE = "Ambulance"


class Granularity(str, Enum):
    FISCAL_YEAR = "FiscalYear"
    CALENDAR_YEAR = "CalendarYear"
    QUARTER = "Quarter"


ENUM_VALUES = {
    "kind": {k.value for k in FacilityKind},
    "status": {s.value for s in MemberStatus},
    "scheme": {s.value for s in Scheme},
    "diagnosis": {d.value for d in DiagnosisCategory},
    "cost_kind": {k.value for k in CostKind},
}

# ---------------------------------------------------------------------------
# Months and periods
# ---------------------------------------------------------------------------
# A month is an int counting months since 1970-01, the same origin numpy uses
# for datetime64[M].

_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")


def parse_month(text: str) -> int:
    m = _MONTH_RE.match(text.strip())
    if not m or not 1 <= int(m.group(2)) <= 12:
        raise ValueError(f"invalid month {text!r}; expected YYYY-MM")
    return (int(m.group(1)) - 1970) * 12 + int(m.group(2)) - 1


def format_month(month: int) -> str:
    year, idx = divmod(int(month), 12)
    return f"{year + 1970:04d}-{idx + 1:02d}"


def month_of(date: dt.date) -> int:
    return (date.year - 1970) * 12 + date.month - 1


def month_start(month: int) -> dt.date:
    year, idx = divmod(int(month), 12)
    return dt.date(year + 1970, idx + 1, 1)


def months_of_dates(dates: pd.Series) -> np.ndarray:
    """Month index of each datetime in a series (NaT is not allowed)."""
    return dates.to_numpy(dtype="datetime64[M]").astype(np.int64)


@dataclass(frozen=True, order=True)
class Period:
    """An inclusive range of whole months."""

    start: int
    end: int
    granularity: Granularity = field(default=Granularity.FISCAL_YEAR, compare=False)

    def __post_init__(self):
        n = self.end - self.start + 1
        if n < 1:
            raise ValueError("period start must not be after end")
        if self.granularity is Granularity.QUARTER:
            if n != 3 or self.start % 3 != 0:
                raise ValueError("a quarter spans exactly one calendar quarter")
        elif n != 12:
            raise ValueError("a year period spans exactly 12 months")
        if self.granularity is Granularity.CALENDAR_YEAR and self.start % 12 != 0:
            raise ValueError("a calendar year starts in January")

    @property
    def n_months(self) -> int:
        return self.end - self.start + 1

    def months(self) -> range:
        return range(self.start, self.end + 1)

    def contains(self, month: int) -> bool:
        return self.start <= month <= self.end

    @property
    def label(self) -> str:
        if self.granularity is Granularity.QUARTER:
            year, idx = divmod(self.start, 12)
            return f"{year + 1970}-Q{idx // 3 + 1}"
        if self.granularity is Granularity.CALENDAR_YEAR:
            return str(self.start // 12 + 1970)
        return f"FY{self.end // 12 + 1970}"

    def shift_years(self, years: int) -> "Period":
        return Period(self.start + 12 * years, self.end + 12 * years, self.granularity)

    def quarters(self) -> list["Period"]:
        if self.granularity is Granularity.QUARTER:
            return [self]
        return [Period(m, m + 2, Granularity.QUARTER) for m in range(self.start, self.end + 1, 3)]

    @classmethod
    def quarter(cls, year: int, q: int) -> "Period":
        start = (year - 1970) * 12 + 3 * (q - 1)
        return cls(start, start + 2, Granularity.QUARTER)

    @classmethod
    def fiscal_year(cls, end_year: int, anchor_month: int = 7) -> "Period":
        """Fiscal year ending in ``end_year``; FY2024 runs 2023-07 to 2024-06."""
        if anchor_month == 1:
            start = (end_year - 1970) * 12
            return cls(start, start + 11, Granularity.CALENDAR_YEAR)
        start = (end_year - 1 - 1970) * 12 + anchor_month - 1
        return cls(start, start + 11, Granularity.FISCAL_YEAR)

    @classmethod
    def parse(cls, text: str, fiscal_anchor: int = 7) -> "Period":
        """Parse ``FY2024``, ``2024``, ``2024-Q3`` or ``2023-07:2024-06``."""
        text = text.strip()
        if m := re.fullmatch(r"FY(\d{4})", text):
            return cls.fiscal_year(int(m.group(1)), fiscal_anchor)
        if m := re.fullmatch(r"(\d{4})-Q([1-4])", text):
            return cls.quarter(int(m.group(1)), int(m.group(2)))
        if re.fullmatch(r"\d{4}", text):
            start = (int(text) - 1970) * 12
            return cls(start, start + 11, Granularity.CALENDAR_YEAR)
        if ":" in text:
            a, b = text.split(":", 1)
            start, end = parse_month(a), parse_month(b)
            n = end - start + 1
            if n == 3 and start % 3 == 0:
                return cls(start, end, Granularity.QUARTER)
            if n == 12 and start % 12 == 0:
                return cls(start, end, Granularity.CALENDAR_YEAR)
            return cls(start, end, Granularity.FISCAL_YEAR)
        raise ValueError(f"cannot parse period {text!r}")

    def __str__(self) -> str:
        return self.label


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FacilityRecord:
    facility_id: str
    kind: FacilityKind
    medicalized: bool = False
    parent_hc_id: Optional[str] = None
    catchment_id: Optional[str] = None
    district_id: str = ""
    province_id: str = ""
    first_active_month: str = "1970-01"
    last_active_month: str = "9999-12"


@dataclass(frozen=True)
class MemberRecord:
    member_id: str
    household_id: str
    catchment_id: str
    status: MemberStatus
    last_updated: dt.date
    scheme: Scheme = Scheme.CBHI


@dataclass(frozen=True)
class CostItem:
    kind: CostKind
    item_code: str
    quantity: int
    unit_cost: int  # cents
    is_antibiotic: bool = False
    is_antihistamine: bool = False
    is_non_phc: bool = False
    is_lab_test: bool = False

    @property
    def cost(self) -> int:
        return self.quantity * self.unit_cost


@dataclass(frozen=True)
class VisitRecord:
    visit_id: str
    facility_id: str
    member_id: str
    visit_date: dt.date
    approved: bool = True
    patient_age_years: int = 30
    diagnosis_categories: frozenset = frozenset()
    referred: bool = False
    admitted: bool = False
    admission_date: Optional[dt.date] = None
    discharge_date: Optional[dt.date] = None
    cost_items: tuple = ()
    recorded_copay_total: int = 0  # cents


# ---------------------------------------------------------------------------
# Column layouts
# ---------------------------------------------------------------------------

FACILITY_COLUMNS = [
    "facility_id", "kind", "medicalized", "parent_hc_id", "catchment_id",
    "district_id", "province_id", "first_active_month", "last_active_month",
]
MEMBER_COLUMNS = ["member_id", "household_id", "catchment_id", "status", "last_updated", "scheme"]
VISIT_COLUMNS = [
    "visit_id", "facility_id", "member_id", "visit_date", "approved", "patient_age_years",
    "diagnosis_categories", "referred", "admitted", "admission_date", "discharge_date",
    "recorded_copay_total",
]
COST_ITEM_COLUMNS = ["visit_id", "kind", "item_code", "quantity", "unit_cost"]
CODE_MAP_COLUMNS = ["item_code", "is_antibiotic", "is_antihistamine", "is_non_phc", "is_lab_test"]
CODE_FLAGS = CODE_MAP_COLUMNS[1:]


def join_categories(categories: Iterable) -> str:
    return "|".join(sorted(DiagnosisCategory(c).value for c in categories))


def facilities_frame(records: Iterable[FacilityRecord]) -> pd.DataFrame:
    rows = [
        (
            r.facility_id, FacilityKind(r.kind).value, bool(r.medicalized), r.parent_hc_id or "",
            r.catchment_id or "", r.district_id, r.province_id,
            parse_month(r.first_active_month), parse_month(r.last_active_month),
        )
        for r in records
    ]
    df = pd.DataFrame(rows, columns=FACILITY_COLUMNS)
    return df.astype({"medicalized": bool, "first_active_month": np.int64, "last_active_month": np.int64})


def members_frame(records: Iterable[MemberRecord]) -> pd.DataFrame:
    rows = [
        (r.member_id, r.household_id, r.catchment_id, MemberStatus(r.status).value,
         pd.Timestamp(r.last_updated), Scheme(r.scheme).value)
        for r in records
    ]
    df = pd.DataFrame(rows, columns=MEMBER_COLUMNS)
    df["last_updated"] = pd.to_datetime(df["last_updated"])
    return df


def visits_frames(records: Iterable[VisitRecord]) -> tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    """Split visit records into (visits, cost_items, code_map) frames."""
    vrows, crows, codes = [], [], {}
    for v in records:
        vrows.append((
            v.visit_id, v.facility_id, v.member_id, pd.Timestamp(v.visit_date), bool(v.approved),
            int(v.patient_age_years), join_categories(v.diagnosis_categories), bool(v.referred),
            bool(v.admitted),
            pd.Timestamp(v.admission_date) if v.admission_date else pd.NaT,
            pd.Timestamp(v.discharge_date) if v.discharge_date else pd.NaT,
            int(v.recorded_copay_total),
        ))
        for item in v.cost_items:
            crows.append((v.visit_id, CostKind(item.kind).value, item.item_code,
                          int(item.quantity), int(item.unit_cost)))
            codes[item.item_code] = (item.is_antibiotic, item.is_antihistamine,
                                     item.is_non_phc, item.is_lab_test)
    visits = pd.DataFrame(vrows, columns=VISIT_COLUMNS)
    for col in ("visit_date", "admission_date", "discharge_date"):
        visits[col] = pd.to_datetime(visits[col])
    visits = visits.astype({"approved": bool, "referred": bool, "admitted": bool,
                            "patient_age_years": np.int64, "recorded_copay_total": np.int64})
    items = pd.DataFrame(crows, columns=COST_ITEM_COLUMNS).astype(
        {"quantity": np.int64, "unit_cost": np.int64})
    code_map = pd.DataFrame(
        [(code, *flags) for code, flags in sorted(codes.items())], columns=CODE_MAP_COLUMNS
    ).astype({c: bool for c in CODE_FLAGS})
    return visits, items, code_map


# ---------------------------------------------------------------------------
# Findings and validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Finding:
    """A data-quality or computation finding. Findings never abort a run."""

    code: str
    entity: str
    key: str
    message: str = field(default="", compare=False)
    line: Optional[int] = field(default=None, compare=False)

    def __str__(self) -> str:
        where = f" (line {self.line})" if self.line is not None else ""
        return f"{self.code} {self.entity}={self.key}{where}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple = ()

    @property
    def clean(self) -> bool:
        return not self.findings

    def counts(self) -> Counter:
        return Counter(f.code for f in self.findings)

    def keys(self, code: str) -> set:
        return {f.key for f in self.findings if f.code == code}

    def __len__(self) -> int:
        return len(self.findings)


def _as_frame(obj, builder) -> Optional[pd.DataFrame]:
    if obj is None or isinstance(obj, pd.DataFrame):
        return obj
    return builder(list(obj))


def _emit(findings, code, entity, keys, message):
    findings.extend(Finding(code, entity, str(k), message) for k in keys)


def validate_dataset(facilities, members, visits, cost_items=None, code_map=None) -> ValidationReport:
    """Check every record invariant and cross-reference.

    Accepts frames (as held by a bundle) or iterables of records. Visit
    records carry their own cost items, so ``cost_items`` and ``code_map``
    are derived from them when not given.
    """
    fac = _as_frame(facilities, facilities_frame)
    mem = _as_frame(members, members_frame)
    if visits is not None and not isinstance(visits, pd.DataFrame):
        visits, derived_items, derived_codes = visits_frames(list(visits))
        cost_items = derived_items if cost_items is None else cost_items
        code_map = derived_codes if code_map is None else code_map
    vis = visits
    out: list[Finding] = []

    fac = fac if fac is not None else pd.DataFrame(columns=FACILITY_COLUMNS)
    mem = mem if mem is not None else pd.DataFrame(columns=MEMBER_COLUMNS)
    vis = vis if vis is not None else pd.DataFrame(columns=VISIT_COLUMNS)

    # facilities
    _emit(out, "DuplicateKey", "facility", fac.loc[fac.facility_id.duplicated(), "facility_id"], "duplicate facility_id")
    _emit(out, "UnknownEnumValue", "facility", fac.loc[~fac.kind.isin(ENUM_VALUES["kind"]), "facility_id"], "unknown facility kind")
    is_hc = fac.kind == FacilityKind.HEALTH_CENTER.value
    is_php = fac.kind == FacilityKind.PUBLIC_HEALTH_POST.value
    hc_ids = set(fac.loc[is_hc, "facility_id"])
    _emit(out, "MissingParent", "facility", fac.loc[is_php & (fac.parent_hc_id == ""), "facility_id"],
          "public health post without parent_hc_id")
    _emit(out, "DanglingParentKey", "facility",
          fac.loc[is_php & (fac.parent_hc_id != "") & ~fac.parent_hc_id.isin(hc_ids), "facility_id"],
          "parent_hc_id is not a known health center")
    _emit(out, "MissingCatchment", "facility", fac.loc[is_hc & (fac.catchment_id == ""), "facility_id"],
          "health center without catchment_id")
    _emit(out, "DuplicateCatchment", "facility",
          fac.loc[is_hc & (fac.catchment_id != "") & fac.catchment_id.where(is_hc).duplicated(keep=False), "facility_id"],
          "catchment assigned to more than one health center")
    _emit(out, "DateOrderViolation", "facility",
          fac.loc[fac.first_active_month > fac.last_active_month, "facility_id"],
          "first_active_month after last_active_month")
    _emit(out, "MedicalizedNotHealthCenter", "facility", fac.loc[fac.medicalized & ~is_hc, "facility_id"],
          "only health centers can be medicalized")

    # members
    catchments = set(fac.loc[is_hc, "catchment_id"]) - {""}
    _emit(out, "DuplicateKey", "member", mem.loc[mem.member_id.duplicated(), "member_id"], "duplicate member_id")
    _emit(out, "DanglingCatchmentKey", "member", mem.loc[~mem.catchment_id.isin(catchments), "member_id"],
          "catchment_id is not assigned to any health center")
    _emit(out, "UnknownEnumValue", "member", mem.loc[~mem.status.isin(ENUM_VALUES["status"]), "member_id"], "unknown status")
    _emit(out, "UnknownEnumValue", "member", mem.loc[~mem.scheme.isin(ENUM_VALUES["scheme"]), "member_id"], "unknown scheme")
    _emit(out, "InvalidDate", "member", mem.loc[pd.isna(mem.last_updated), "member_id"], "last_updated is not a valid date")

    # visits
    _emit(out, "DuplicateKey", "visit", vis.loc[vis.visit_id.duplicated(), "visit_id"], "duplicate visit_id")
    _emit(out, "DanglingFacilityKey", "visit", vis.loc[~vis.facility_id.isin(set(fac.facility_id)), "visit_id"],
          "facility_id not found")
    _emit(out, "DanglingMemberKey", "visit", vis.loc[~vis.member_id.isin(set(mem.member_id)), "visit_id"],
          "member_id not found")
    both = vis.admitted & vis.admission_date.notna() & vis.discharge_date.notna()
    _emit(out, "DateOrderViolation", "visit", vis.loc[both & (vis.discharge_date < vis.admission_date), "visit_id"],
          "discharge before admission")
    _emit(out, "NegativeCost", "visit", vis.loc[vis.recorded_copay_total < 0, "visit_id"], "negative recorded co-payment")
    _emit(out, "NegativeAge", "visit", vis.loc[vis.patient_age_years < 0, "visit_id"], "negative patient age")
    if len(vis):
        cats = vis.diagnosis_categories.str.split("|").explode()
        bad = cats[(cats != "") & ~cats.isin(ENUM_VALUES["diagnosis"])]
        _emit(out, "UnknownEnumValue", "visit", vis.loc[sorted(set(bad.index)), "visit_id"], "unknown diagnosis category")

    # cost items
    if cost_items is not None and len(cost_items):
        ci = cost_items.reset_index(drop=True)
        label = ci.visit_id + "#" + ci.item_code
        _emit(out, "DanglingVisitKey", "cost_item", label[~ci.visit_id.isin(set(vis.visit_id))], "visit_id not found")
        _emit(out, "UnknownEnumValue", "cost_item", label[~ci.kind.isin(ENUM_VALUES["cost_kind"])], "unknown cost kind")
        _emit(out, "NegativeCost", "cost_item", label[ci.unit_cost < 0], "negative unit cost")
        _emit(out, "NonPositiveQuantity", "cost_item", label[ci.quantity <= 0], "quantity must be positive")
        if code_map is not None:
            flags = ci[["item_code", "kind"]].merge(code_map, on="item_code", how="left")
            known = flags.is_antibiotic.notna().to_numpy()
            _emit(out, "UnknownItemCode", "cost_item", label[~known], "item_code missing from code map")
            abx = flags.is_antibiotic.eq(True).to_numpy()
            nonphc = flags.is_non_phc.eq(True).to_numpy()
            _emit(out, "FlagKindMismatch", "cost_item", label[abx & (ci.kind != CostKind.DRUG.value).to_numpy()],
                  "antibiotic item must be a Drug")
            _emit(out, "FlagKindMismatch", "cost_item", label[nonphc & (ci.kind != CostKind.SERVICE.value).to_numpy()],
                  "non-PHC flag only allowed on Service items")

    return ValidationReport(tuple(sorted(out)))
