"""Utilization tiers and capture-ratio groups.

Facilities are ordered by the metric with ties broken by facility_id, then
cut into groups of equal size; when the count does not divide evenly the
lowest-index groups take one extra facility each.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import pandas as pd

from .domain import DataError, Finding
from .metrics import FacilityMetrics


class TooFewFacilities(DataError):
    pass


class UnknownFacility(KeyError):
    pass


class Tier(str, Enum):
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"


TIERS = (Tier.LOW, Tier.MEDIUM, Tier.HIGH)
MIN_FACILITIES = 15


def group_sizes(n: int, n_groups: int) -> list[int]:
    base, extra = divmod(n, n_groups)
    return [base + (1 if g < extra else 0) for g in range(n_groups)]


def equal_count_groups(values: Sequence[float], ids: Sequence[str], n_groups: int) -> np.ndarray:
    """0-based group index of each input position."""
    values = np.asarray(values, dtype=np.float64)
    ids = np.asarray(ids, dtype=str)
    if len(values) < n_groups:
        raise TooFewFacilities(f"{len(values)} facilities cannot fill {n_groups} groups")
    order = np.lexsort((ids, values))
    groups = np.empty(len(values), dtype=np.int64)
    groups[order] = np.repeat(np.arange(n_groups), group_sizes(len(values), n_groups))
    return groups


def _ranges(values: np.ndarray, groups: np.ndarray, n_groups: int) -> tuple:
    return tuple((float(values[groups == g].min()), float(values[groups == g].max())) for g in range(n_groups))


@dataclass(frozen=True)
class SegmentationResult:
    """Tier per facility (from catchment PHC utilization) and capture group 1..k with its median u."""

    tiers: dict
    groups: dict
    group_median_u: dict
    tier_boundaries: tuple
    capture_group_boundaries: tuple
    tier_ranges: tuple = ()
    group_ranges: tuple = ()
    findings: tuple = field(default=())

    @property
    def facility_ids(self) -> list[str]:
        return sorted(self.tiers)

    def tier_of(self, facility_id: str) -> Tier:
        try:
            return self.tiers[facility_id]
        except KeyError:
            raise UnknownFacility(facility_id) from None

    def to_frame(self) -> pd.DataFrame:
        rows = [(fid, self.tiers[fid].value, self.groups[fid], self.group_median_u[self.groups[fid]])
                for fid in self.facility_ids]
        return pd.DataFrame(rows, columns=["facility_id", "tier", "capture_group", "U"])

    def to_dict(self) -> dict:
        return {
            "tiers": {k: v.value for k, v in sorted(self.tiers.items())},
            "groups": dict(sorted(self.groups.items())),
            "group_median_u": {str(k): v for k, v in sorted(self.group_median_u.items())},
            "tier_boundaries": list(self.tier_boundaries),
            "capture_group_boundaries": list(self.capture_group_boundaries),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentationResult":
        return cls(
            tiers={k: Tier(v) for k, v in d["tiers"].items()},
            groups={k: int(v) for k, v in d["groups"].items()},
            group_median_u={int(k): float(v) for k, v in d["group_median_u"].items()},
            tier_boundaries=tuple(d["tier_boundaries"]),
            capture_group_boundaries=tuple(d["capture_group_boundaries"]),
        )


def _boundaries(values: np.ndarray, groups: np.ndarray, n_groups: int) -> tuple:
    # cut point k is the smallest value in group k+1
    return tuple(float(values[groups == g].min()) for g in range(1, n_groups))


def segment(metrics: Sequence[FacilityMetrics], n_tiers: int = 3, n_groups: int = 5,
            min_facilities: int = MIN_FACILITIES) -> SegmentationResult:
    """Tier facilities by PHC utilization and group them by capture ratio."""
    if n_tiers != len(TIERS):
        raise ValueError("exactly three utilization tiers are supported")
    metrics = list(metrics)
    if len(metrics) < min_facilities:
        raise TooFewFacilities(f"segmentation needs at least {min_facilities} facilities, got {len(metrics)}")
    ids = [m.facility_id for m in metrics]
    util = np.array([m.phc_utilization_rate for m in metrics])
    capture = np.array([m.capture_ratio for m in metrics])
    u = np.array([m.hc_utilization_rate for m in metrics])

    tier_idx = equal_count_groups(util, ids, n_tiers)
    group_idx = equal_count_groups(capture, ids, n_groups)
    medians = {g + 1: float(np.median(u[group_idx == g])) for g in range(n_groups)}

    findings = []
    ordered = [medians[g] for g in sorted(medians)]
    if any(b < a for a, b in zip(ordered, ordered[1:])):
        findings.append(Finding("NonMonotoneMedians", "segmentation", "capture_groups",
                                "median u decreases between consecutive capture groups"))
    return SegmentationResult(
        tiers={fid: TIERS[t] for fid, t in zip(ids, tier_idx)},
        groups={fid: int(g) + 1 for fid, g in zip(ids, group_idx)},
        group_median_u=medians,
        tier_boundaries=_boundaries(util, tier_idx, n_tiers),
        capture_group_boundaries=_boundaries(capture, group_idx, n_groups),
        tier_ranges=_ranges(util, tier_idx, n_tiers),
        group_ranges=_ranges(capture, group_idx, n_groups),
        findings=tuple(findings),
    )


def lookup_U(facility_id: str, segmentation: SegmentationResult) -> float:
    """Median in-center utilization of the facility's capture group."""
    try:
        group = segmentation.groups[facility_id]
    except KeyError:
        raise UnknownFacility(facility_id) from None
    return segmentation.group_median_u[group]
