import numpy as np
import pytest

from capitation.metrics import FacilityMetrics
from capitation.segmentation import (
    Tier,
    TooFewFacilities,
    UnknownFacility,
    equal_count_groups,
    group_sizes,
    lookup_U,
    segment,
)


def fm(fid, util, capture, u):
    return FacilityMetrics(fid, "2023", "C" + fid, "D", "P", False, 12, 100, 0, 0, 0, 0, 0, 0,
                           util, u, capture, 0.0)


def metrics(n, seed=0):
    rng = np.random.default_rng(seed)
    return [fm(f"F{i:03d}", rng.uniform(0.8, 2.5), rng.uniform(0.1, 0.9), rng.uniform(0.2, 1.2)) for i in range(n)]


class TestGroups:
    def test_fifteen_into_tiers(self):
        seg = segment(metrics(15))
        counts = {t: sum(1 for v in seg.tiers.values() if v is t) for t in Tier}
        assert counts == {Tier.LOW: 5, Tier.MEDIUM: 5, Tier.HIGH: 5}

    def test_remainders_to_lowest_groups(self):
        assert group_sizes(17, 5) == [4, 4, 3, 3, 3]
        seg = segment(metrics(17))
        sizes = [sum(1 for g in seg.groups.values() if g == k) for k in range(1, 6)]
        assert sizes == [4, 4, 3, 3, 3]

    def test_ties_broken_by_id(self):
        g = equal_count_groups([1.0, 1.0, 1.0, 1.0], ["d", "c", "b", "a"], 2)
        assert g.tolist() == [1, 1, 0, 0]

    def test_too_few(self):
        with pytest.raises(TooFewFacilities):
            segment(metrics(14))

    def test_permutation_invariant(self):
        m = metrics(40, 3)
        a = segment(m)
        b = segment(m[::-1])
        assert a.tiers == b.tiers and a.groups == b.groups and a.group_median_u == b.group_median_u

    def test_monotone_transform_invariant(self):
        m = metrics(40, 4)
        t = [fm(x.facility_id, np.exp(x.phc_utilization_rate), x.capture_ratio ** 3, x.hc_utilization_rate)
             for x in m]
        assert segment(m).tiers == segment(t).tiers
        assert segment(m).groups == segment(t).groups

    def test_group_median_even_count(self):
        m = [fm(f"F{i:02d}", 1.0 + i, i / 20, float(i)) for i in range(20)]
        seg = segment(m)
        # group 1 holds capture ranks 0..3 with u = 0, 1, 2, 3
        assert seg.group_median_u[1] == 1.5


class TestLookup:
    def test_same_group_same_u(self):
        seg = segment(metrics(20))
        ids = [f for f, g in seg.groups.items() if g == 5]
        assert lookup_U(ids[0], seg) == lookup_U(ids[1], seg) == seg.group_median_u[5]

    def test_unknown(self):
        with pytest.raises(UnknownFacility):
            lookup_U("nope", segment(metrics(20)))

    def test_dict_round_trip(self):
        from capitation.segmentation import SegmentationResult
        seg = segment(metrics(20))
        back = SegmentationResult.from_dict(seg.to_dict())
        assert back.tiers == seg.tiers and back.groups == seg.groups
