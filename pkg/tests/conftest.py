import datetime as dt
import sys
from pathlib import Path

import numpy as np
import pytest

from capitation.domain import (
    CostItem,
    CostKind,
    DiagnosisCategory,
    FacilityKind,
    FacilityRecord,
    MemberRecord,
    MemberStatus,
    Scheme,
    VisitRecord,
)
from capitation.ingest import DatasetBundle
from capitation.synthgen import GeneratorSpec, generate

sys.path.insert(0, str(Path(__file__).parent))

CATEGORIES = list(DiagnosisCategory)


def random_bundle(seed: int, n_hc: int = 6, n_visits: int = 800) -> DatasetBundle:
    """Small messy bundle exercising every metrics rule."""
    rng = np.random.default_rng(seed)
    facilities = []
    for h in range(n_hc):
        first = "2023-01" if rng.random() < 0.7 else f"2023-0{rng.integers(2, 7)}"
        last = "2023-12" if rng.random() < 0.8 else f"2023-{rng.integers(7, 12):02d}"
        facilities.append(FacilityRecord(f"H{h}", FacilityKind.HEALTH_CENTER, bool(rng.random() < 0.3), None,
                                         f"C{h}", f"D{h % 2}", "P1", first, last))
        for k in range(rng.integers(0, 3)):
            facilities.append(FacilityRecord(f"H{h}P{k}", FacilityKind.PUBLIC_HEALTH_POST, False, f"H{h}", None,
                                             f"D{h % 2}", "P1"))
    facilities.append(FacilityRecord("PRIV1", FacilityKind.PRIVATE_HEALTH_POST, False, None, None, "D0", "P1"))
    fac_ids = [f.facility_id for f in facilities]

    members = []
    dates = [dt.date(2023, 1, 1), dt.date(2023, 7, 1), dt.date(2022, 7, 1), dt.date(2020, 1, 1),
             dt.date(2023, 3, 15), dt.date(2024, 1, 1)]
    for i in range(n_hc * 25):
        status = [MemberStatus.ACTIVE, MemberStatus.INACTIVE, MemberStatus.PENDING][rng.choice(3, p=[.6, .15, .25])]
        scheme = Scheme.OTHER if rng.random() < 0.05 else Scheme.CBHI
        members.append(MemberRecord(f"M{i:05d}", f"HH{i // 4}", f"C{rng.integers(n_hc)}", status,
                                    dates[rng.integers(len(dates))], scheme))
    mem_ids = [m.member_id for m in members]

    visits = []
    for j in range(n_visits):
        day = dt.date(2022, 12, 1) + dt.timedelta(days=int(rng.integers(0, 420)))
        items = [CostItem(CostKind.SERVICE, "CONS", 1, int(rng.integers(0, 3)) * 10000)]
        if rng.random() < 0.6:
            abx = rng.random() < 0.5
            items.append(CostItem(CostKind.DRUG, "ABX" if abx else "DRG", int(rng.integers(1, 4)),
                                  int(rng.integers(1, 500)) * 100, is_antibiotic=abx))
        if rng.random() < 0.1:
            items.append(CostItem(CostKind.AMBULANCE, "AMB", 1, int(rng.integers(1, 20)) * 10011))
        if rng.random() < 0.05:
            items.append(CostItem(CostKind.SERVICE, "CSEC", 1, 5000000, is_non_phc=True))
        copay = int(rng.choice([0, 20000, 20000 + int(rng.integers(0, 30000)), 200000]))
        member = mem_ids[rng.integers(len(mem_ids))] if rng.random() < 0.97 else "UNKNOWN"
        cats = frozenset(CATEGORIES[k] for k in rng.choice(len(CATEGORIES), int(rng.integers(0, 3)),
                                                           replace=False))
        visits.append(VisitRecord(f"V{j:06d}", fac_ids[rng.integers(len(fac_ids))], member, day,
                                  bool(rng.random() < 0.9), int(rng.integers(0, 80)), cats,
                                  cost_items=tuple(items), recorded_copay_total=copay))
    return DatasetBundle.from_records(facilities, members, visits)


@pytest.fixture(scope="session")
def small_spec():
    return GeneratorSpec(n_health_centers=40, population_scale=0.01)


@pytest.fixture(scope="session")
def small_generated(small_spec):
    return generate(small_spec)


@pytest.fixture(scope="session")
def default_generated():
    return generate(GeneratorSpec())


def pytest_terminal_summary(terminalreporter):
    status, detail = {}, {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            name = props.get("criterion")
            if name is None:
                continue
            if outcome != "passed":
                status[name] = "FAIL"
            elif rep.when == "call":
                status.setdefault(name, "PASS")
            detail[name] = props.get("detail", detail.get(name, ""))
    if status:
        terminalreporter.section("acceptance criteria")
        for name in sorted(status, key=lambda n: int(n.split()[0])):
            terminalreporter.write_line(f"criterion {name}: {status[name]}  {detail[name]}")
