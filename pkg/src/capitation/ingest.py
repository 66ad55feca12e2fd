"""CSV corpus <-> :class:`DatasetBundle`.

One RFC-4180 CSV file per entity, UTF-8, ISO-8601 dates, ``YYYY-MM`` months,
``true``/``false`` booleans and currency in RWF with at most two decimals.
Rows that fail to parse are quarantined with their line numbers; the load
aborts only when the quarantined share of all rows exceeds the configured
fraction.
"""

from __future__ import annotations

import csv
import hashlib
import io
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from .domain import (
    CODE_FLAGS,
    CODE_MAP_COLUMNS,
    COST_ITEM_COLUMNS,
    ENUM_VALUES,
    FACILITY_COLUMNS,
    MEMBER_COLUMNS,
    VISIT_COLUMNS,
    CapitationError,
    CostItem,
    CostKind,
    DataError,
    DiagnosisCategory,
    FacilityKind,
    FacilityRecord,
    Finding,
    MemberRecord,
    MemberStatus,
    Scheme,
    ValidationReport,
    VisitRecord,
    facilities_frame,
    format_month,
    members_frame,
    validate_dataset,
    visits_frames,
)

FILES = {
    "facilities": ("facilities.csv", FACILITY_COLUMNS),
    "members": ("members.csv", MEMBER_COLUMNS),
    "visits": ("visits.csv", VISIT_COLUMNS),
    "cost_items": ("cost_items.csv", COST_ITEM_COLUMNS),
    "code_map": ("code_map.csv", CODE_MAP_COLUMNS),
}
SORT_KEYS = {
    "facilities": ["facility_id"],
    "members": ["member_id"],
    "visits": ["visit_id"],
    "cost_items": ["visit_id"],
    "code_map": ["item_code"],
}


class IngestError(CapitationError):
    pass


class MissingFile(IngestError):
    pass


class MalformedHeader(IngestError):
    pass


class RowParseError(IngestError, DataError):
    """Raised when quarantined rows exceed the allowed fraction."""

    def __init__(self, message, findings=()):
        super().__init__(message)
        self.findings = tuple(findings)


class IoError(IngestError, OSError):
    pass


_DATE_COLUMNS = {
    "members": ["last_updated"],
    "visits": ["visit_date", "admission_date", "discharge_date"],
}
_DTYPES = {
    "facilities": {"medicalized": bool, "first_active_month": np.int64, "last_active_month": np.int64},
    "members": {},
    "visits": {"approved": bool, "referred": bool, "admitted": bool,
               "patient_age_years": np.int64, "recorded_copay_total": np.int64},
    "cost_items": {"quantity": np.int64, "unit_cost": np.int64},
    "code_map": {flag: bool for flag in CODE_FLAGS},
}


def _canonical(df: pd.DataFrame, name: str) -> pd.DataFrame:
    """Fixed column order, dtypes and row order for a table."""
    columns = FILES[name][1]
    df = df[columns].astype(_DTYPES[name])
    for col in columns:
        if col in _DATE_COLUMNS.get(name, ()):
            df[col] = pd.to_datetime(df[col]).astype("datetime64[ns]")
        elif col not in _DTYPES[name]:
            df[col] = df[col].astype(object)
    return df.sort_values(SORT_KEYS[name], kind="stable").reset_index(drop=True)


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    """Linked facilities, members, visits, cost items and the item code map."""

    facilities: pd.DataFrame
    members: pd.DataFrame
    visits: pd.DataFrame
    cost_items: pd.DataFrame
    code_map: pd.DataFrame
    source_manifest: dict = field(default_factory=dict)
    quarantine: tuple = ()

    @classmethod
    def from_frames(cls, facilities, members, visits, cost_items, code_map, **kw) -> "DatasetBundle":
        return cls(
            _canonical(facilities, "facilities"), _canonical(members, "members"),
            _canonical(visits, "visits"), _canonical(cost_items, "cost_items"),
            _canonical(code_map, "code_map"), **kw,
        )

    @classmethod
    def from_records(cls, facilities: Iterable[FacilityRecord], members: Iterable[MemberRecord],
                     visits: Iterable[VisitRecord], code_map: Optional[pd.DataFrame] = None) -> "DatasetBundle":
        vis, items, codes = visits_frames(list(visits))
        if code_map is not None:
            codes = code_map
        return cls.from_frames(facilities_frame(list(facilities)), members_frame(list(members)),
                               vis, items, codes)

    @classmethod
    def empty(cls) -> "DatasetBundle":
        return cls.from_records([], [], [])

    def replace(self, **frames) -> "DatasetBundle":
        parts = {name: getattr(self, name) for name in FILES}
        parts.update(frames)
        return DatasetBundle.from_frames(**parts)

    @cached_property
    def items(self) -> pd.DataFrame:
        """Cost items with code-map flags joined (unknown codes get all-false flags)."""
        merged = self.cost_items.merge(self.code_map, on="item_code", how="left")
        for flag in CODE_FLAGS:
            merged[flag] = merged[flag].eq(True)
        return merged

    def validate(self) -> ValidationReport:
        return validate_dataset(self.facilities, self.members, self.visits, self.cost_items, self.code_map)

    def equals(self, other: "DatasetBundle") -> bool:
        """Record equality of all five tables (manifest and quarantine ignored)."""
        for name in FILES:
            a, b = getattr(self, name), getattr(other, name)
            if a.shape != b.shape or list(a.columns) != list(b.columns):
                return False
            if not a.reset_index(drop=True).equals(b.reset_index(drop=True)):
                return False
        return True

    # record views -----------------------------------------------------------

    def facility_records(self) -> list[FacilityRecord]:
        return [
            FacilityRecord(r.facility_id, FacilityKind(r.kind), bool(r.medicalized), r.parent_hc_id or None,
                           r.catchment_id or None, r.district_id, r.province_id,
                           format_month(r.first_active_month), format_month(r.last_active_month))
            for r in self.facilities.itertuples(index=False)
        ]

    def member_records(self) -> list[MemberRecord]:
        return [
            MemberRecord(r.member_id, r.household_id, r.catchment_id, MemberStatus(r.status),
                         r.last_updated.date(), Scheme(r.scheme))
            for r in self.members.itertuples(index=False)
        ]

    def visit_records(self) -> list[VisitRecord]:
        items: dict[str, list[CostItem]] = {}
        for r in self.items.itertuples(index=False):
            items.setdefault(r.visit_id, []).append(CostItem(
                CostKind(r.kind), r.item_code, int(r.quantity), int(r.unit_cost),
                bool(r.is_antibiotic), bool(r.is_antihistamine), bool(r.is_non_phc), bool(r.is_lab_test)))

        def day(x):
            return None if pd.isna(x) else x.date()

        return [
            VisitRecord(
                r.visit_id, r.facility_id, r.member_id, r.visit_date.date(), bool(r.approved),
                int(r.patient_age_years),
                frozenset(DiagnosisCategory(c) for c in r.diagnosis_categories.split("|") if c),
                bool(r.referred), bool(r.admitted), day(r.admission_date), day(r.discharge_date),
                tuple(items.get(r.visit_id, ())), int(r.recorded_copay_total),
            )
            for r in self.visits.itertuples(index=False)
        ]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


_INT_RE = re.compile(r"-?\d+")
_MONEY_RE = re.compile(r"(-?)(\d+)(?:\.(\d{1,2}))?")
_MONTH_TEXT_RE = re.compile(r"(\d{4})-(0[1-9]|1[0-2])")


def _parse_integer(text):
    return (True, int(text)) if _INT_RE.fullmatch(text) else (False, 0)


def _parse_money(text):
    m = _MONEY_RE.fullmatch(text)
    if not m:
        return False, 0
    cents = int(m.group(2)) * 100 + int((m.group(3) or "0").ljust(2, "0"))
    return True, -cents if m.group(1) else cents


def _parse_month_text(text):
    m = _MONTH_TEXT_RE.fullmatch(text)
    if not m:
        return False, 0
    return True, (int(m.group(1)) - 1970) * 12 + int(m.group(2)) - 1


def _by_unique(s: pd.Series, parse):
    """Apply a scalar ``parse -> (ok, value)`` once per distinct string."""
    codes, uniq = pd.factorize(s)
    res = [parse(u) for u in uniq]
    ok = np.array([r[0] for r in res], dtype=bool)
    val = np.array([r[1] for r in res], dtype=np.int64)
    return ok[codes], val[codes]


class _Parser:
    """Column parsers that mark bad rows instead of raising."""

    def __init__(self, df: pd.DataFrame, name: str):
        self.df = df
        self.name = name
        self.bad = np.zeros(len(df), dtype=bool)
        self.reasons: dict[int, str] = {}
        self.enum_bad = np.zeros(len(df), dtype=bool)

    def _mark(self, mask, reason, enum=False):
        mask = np.asarray(mask, dtype=bool)
        for i in np.flatnonzero(mask & ~self.bad & ~self.enum_bad):
            self.reasons[int(i)] = reason
        if enum:
            self.enum_bad |= mask
        else:
            self.bad |= mask

    def text(self, col, required=True):
        s = self.df[col]
        if required:
            self._mark(s == "", f"empty {col}")
        return s

    def boolean(self, col):
        s = self.df[col]
        self._mark(~s.isin(["true", "false"]), f"invalid boolean in {col}")
        return s == "true"

    def integer(self, col):
        ok, val = _by_unique(self.df[col], _parse_integer)
        self._mark(~ok, f"invalid integer in {col}")
        return pd.Series(val, index=self.df.index, dtype=np.int64)

    def money(self, col):
        ok, val = _by_unique(self.df[col], _parse_money)
        self._mark(~ok, f"invalid amount in {col}")
        return pd.Series(val, index=self.df.index, dtype=np.int64)

    def date(self, col, required=True):
        s = self.df[col]
        codes, uniq = pd.factorize(s)
        parsed = pd.to_datetime(pd.Series(uniq), format="%Y-%m-%d", errors="coerce")
        parsed = pd.Series(parsed.to_numpy()[codes], index=s.index)
        bad = parsed.isna() & ((s != "") | required)
        self._mark(bad, f"invalid date in {col}")
        return parsed

    def month(self, col):
        ok, val = _by_unique(self.df[col], _parse_month_text)
        self._mark(~ok, f"invalid month in {col}")
        return pd.Series(val, index=self.df.index, dtype=np.int64)

    def enum(self, col, allowed):
        s = self.df[col]
        self._mark(~s.isin(allowed), f"unknown value in {col}", enum=True)
        return s

    def categories(self, col):
        s = self.df[col]
        codes, uniq = pd.factorize(s)
        allowed = set(ENUM_VALUES["diagnosis"])
        parts = [[p for p in u.split("|") if p] for u in uniq]
        bad = np.array([any(p not in allowed for p in ps) for ps in parts], dtype=bool)
        self._mark(bad[codes], f"unknown value in {col}", enum=True)
        # canonical order so round trips are exact
        canon = np.array(["|".join(sorted(ps)) for ps in parts], dtype=object)
        return pd.Series(canon[codes], index=s.index, dtype=object)

    def findings(self) -> list[Finding]:
        out = []
        for i, reason in sorted(self.reasons.items()):
            code = "UnknownEnumValue" if self.enum_bad[i] and not self.bad[i] else "RowParseError"
            key = str(self.df.iloc[i, 0])
            out.append(Finding(code, self.name, key, reason, line=i + 2))
        return out

    @property
    def keep(self) -> np.ndarray:
        return ~(self.bad | self.enum_bad)


def _parse_facilities(df):
    p = _Parser(df, "facility")
    out = pd.DataFrame({
        "facility_id": p.text("facility_id"),
        "kind": p.enum("kind", ENUM_VALUES["kind"]),
        "medicalized": p.boolean("medicalized"),
        "parent_hc_id": p.text("parent_hc_id", required=False),
        "catchment_id": p.text("catchment_id", required=False),
        "district_id": p.text("district_id", required=False),
        "province_id": p.text("province_id", required=False),
        "first_active_month": p.month("first_active_month"),
        "last_active_month": p.month("last_active_month"),
    })
    return out, p


def _parse_members(df):
    p = _Parser(df, "member")
    out = pd.DataFrame({
        "member_id": p.text("member_id"),
        "household_id": p.text("household_id", required=False),
        "catchment_id": p.text("catchment_id", required=False),
        "status": p.enum("status", ENUM_VALUES["status"]),
        "last_updated": p.date("last_updated"),
        "scheme": p.enum("scheme", ENUM_VALUES["scheme"]),
    })
    return out, p


def _parse_visits(df):
    p = _Parser(df, "visit")
    out = pd.DataFrame({
        "visit_id": p.text("visit_id"),
        "facility_id": p.text("facility_id"),
        "member_id": p.text("member_id"),
        "visit_date": p.date("visit_date"),
        "approved": p.boolean("approved"),
        "patient_age_years": p.integer("patient_age_years"),
        "diagnosis_categories": p.categories("diagnosis_categories"),
        "referred": p.boolean("referred"),
        "admitted": p.boolean("admitted"),
        "admission_date": p.date("admission_date", required=False),
        "discharge_date": p.date("discharge_date", required=False),
        "recorded_copay_total": p.money("recorded_copay_total"),
    })
    return out, p


def _parse_cost_items(df):
    p = _Parser(df, "cost_item")
    out = pd.DataFrame({
        "visit_id": p.text("visit_id"),
        "kind": p.enum("kind", ENUM_VALUES["cost_kind"]),
        "item_code": p.text("item_code"),
        "quantity": p.integer("quantity"),
        "unit_cost": p.money("unit_cost"),
    })
    return out, p


def _parse_code_map(df):
    p = _Parser(df, "code")
    out = pd.DataFrame({"item_code": p.text("item_code")})
    for flag in CODE_FLAGS:
        out[flag] = p.boolean(flag) if flag in df.columns else False
    return out, p


_PARSERS = {
    "facilities": _parse_facilities,
    "members": _parse_members,
    "visits": _parse_visits,
    "cost_items": _parse_cost_items,
    "code_map": _parse_code_map,
}


def _read_table(path: Path, name: str, columns: list[str]) -> tuple[pd.DataFrame, str]:
    if not path.is_file():
        raise MissingFile(f"missing input file {path.name}")
    raw = path.read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    text = raw.decode("utf-8")
    header = next(csv.reader(io.StringIO(text)), [])
    allowed = [columns]
    if name == "code_map":
        allowed.append(columns[:-1])  # lab-test flag column is optional
    if header not in allowed:
        raise MalformedHeader(f"{path.name}: expected header {','.join(columns)}, got {','.join(header)}")
    df = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, na_filter=False)
    return df, digest


def load_bundle(directory, config=None) -> DatasetBundle:
    """Parse and link the five CSV files in ``directory``."""
    from .config import Config

    config = config or Config()
    directory = Path(directory)
    frames, manifest, quarantine = {}, {"files": {}}, []
    total_rows = 0
    for name, (filename, columns) in FILES.items():
        raw, digest = _read_table(directory / filename, name, columns)
        total_rows += len(raw)
        parsed, parser = _PARSERS[name](raw)
        quarantine.extend(parser.findings())
        keep = parser.keep
        frames[name] = parsed.loc[keep].reset_index(drop=True)
        if name == "cost_items":
            frames[name]["_line"] = np.flatnonzero(keep) + 2
        manifest["files"][filename] = {"sha256": digest, "rows_read": len(raw)}

    items = frames["cost_items"]
    dangling = ~items.visit_id.isin(set(frames["visits"].visit_id))
    quarantine.extend(
        Finding("DanglingVisitKey", "cost_item", v, "cost item references unknown visit", line=int(ln))
        for v, ln in zip(items.visit_id[dangling], items._line[dangling])
    )
    frames["cost_items"] = items.loc[~dangling].drop(columns="_line").reset_index(drop=True)

    if total_rows and len(quarantine) / total_rows > config.quarantine_fraction:
        raise RowParseError(
            f"{len(quarantine)} of {total_rows} rows quarantined, above the "
            f"{config.quarantine_fraction:.2%} limit; first: {quarantine[0]}",
            quarantine,
        )

    for name, (filename, _) in FILES.items():
        manifest["files"][filename]["rows"] = len(frames[name])
    manifest["quarantined"] = len(quarantine)
    return DatasetBundle.from_frames(**frames, source_manifest=manifest, quarantine=tuple(quarantine))


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def _fmt_bool(s: pd.Series) -> pd.Series:
    return s.map({True: "true", False: "false"}).astype(str)


def _fmt_date(s: pd.Series) -> pd.Series:
    return s.dt.strftime("%Y-%m-%d").fillna("")


def _fmt_month(s: pd.Series) -> pd.Series:
    return pd.Series([format_month(m) for m in s], index=s.index, dtype=object)


def format_money(cents) -> pd.Series:
    c = pd.Series(cents, dtype=np.int64)
    a = c.abs()
    sign = np.where(c < 0, "-", "")
    return sign + (a // 100).astype(str) + "." + (a % 100).astype(str).str.zfill(2)


def _serialize(name: str, df: pd.DataFrame) -> pd.DataFrame:
    out = df.copy()
    if name == "facilities":
        out["medicalized"] = _fmt_bool(out.medicalized)
        out["first_active_month"] = _fmt_month(out.first_active_month)
        out["last_active_month"] = _fmt_month(out.last_active_month)
    elif name == "members":
        out["last_updated"] = _fmt_date(out.last_updated)
    elif name == "visits":
        for col in ("visit_date", "admission_date", "discharge_date"):
            out[col] = _fmt_date(out[col])
        for col in ("approved", "referred", "admitted"):
            out[col] = _fmt_bool(out[col])
        out["recorded_copay_total"] = format_money(out.recorded_copay_total.to_numpy()).to_numpy()
    elif name == "cost_items":
        out["unit_cost"] = format_money(out.unit_cost.to_numpy()).to_numpy()
    elif name == "code_map":
        for flag in CODE_FLAGS:
            out[flag] = _fmt_bool(out[flag])
    return out


def frame_to_csv_bytes(df: pd.DataFrame) -> bytes:
    return df.to_csv(index=False, lineterminator="\n").encode("utf-8")


def write_bundle(bundle: DatasetBundle, directory) -> dict:
    """Write the five CSV files; returns ``{filename: {rows, sha256}}``."""
    directory = Path(directory)
    manifest = {}
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for name, (filename, columns) in FILES.items():
            data = frame_to_csv_bytes(_serialize(name, getattr(bundle, name)[columns]))
            (directory / filename).write_bytes(data)
            manifest[filename] = {"rows": len(getattr(bundle, name)),
                                  "sha256": hashlib.sha256(data).hexdigest()}
    except OSError as exc:
        raise IoError(f"cannot write bundle to {directory}: {exc}") from exc
    return manifest
