import numpy as np
import pytest

from capitation.calibration import (
    CapitationParams,
    DesignRow,
    FitMethod,
    InconsistentCoverage,
    RankDeficient,
    build_design,
    design_arrays,
    fit,
    fit_ols,
    fit_robust,
    over_under,
    robustness_harness,
)
from capitation.metrics import FacilityMetrics
from capitation.segmentation import segment

TRUTH = np.array([912.0, 1278.0, 1562.0, 1126.0])


def planted_rows(n=60, seed=0, noise=0.0, truth=TRUTH):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        x = np.zeros(4)
        x[i % 3] = rng.uniform(5_000, 20_000)
        x[3] = rng.uniform(100, 3_000)
        y = float(x @ truth) * (1 + noise * rng.standard_normal())
        rows.append(DesignRow(f"F{i:03d}", y, *x))
    return rows


def fm(fid, M, inflow, util, capture, u, cost=1.0):
    return FacilityMetrics(fid, "2023", "C", "D", "P", False, 12, M, 0, int(cost * 100), 0, 0, 0, 0,
                           util, u, capture, inflow)


class TestBuildDesign:
    def test_row_construction(self):
        ms = [fm(f"F{i:02d}", 100, 7.0, 1.0 + i, i / 20, 0.5) for i in range(15)]
        seg = segment(ms)
        rows = {r.facility_id: r for r in build_design(ms, seg)}
        low = [f for f, t in seg.tiers.items() if t.value == "Low"][0]
        r = rows[low]
        assert (r.x_low, r.x_med, r.x_high, r.x_inflow) == (50.0, 0.0, 0.0, 7.0)

    def test_zero_members(self):
        ms = [fm(f"F{i:02d}", 0 if i == 0 else 100, 3.0, 1.0 + i, i / 20, 0.5) for i in range(15)]
        r = build_design(ms, segment(ms))[0]
        assert (r.x_low, r.x_med, r.x_high, r.x_inflow) == (0.0, 0.0, 0.0, 3.0)

    def test_mismatch(self):
        ms = [fm(f"F{i:02d}", 100, 3.0, 1.0 + i, i / 20, 0.5) for i in range(15)]
        with pytest.raises(InconsistentCoverage):
            build_design(ms[1:], segment(ms))


class TestOLS:
    def test_identity_design(self):
        rows = [DesignRow(str(i), 1.0, *np.eye(4)[i]) for i in range(4)]
        assert np.allclose(fit_ols(rows).vector, 1.0)

    def test_single_tier_rank_deficient(self):
        rows = [DesignRow(str(i), 1.0, 1.0 + i, 0, 0, 2.0 * i) for i in range(10)]
        with pytest.raises(RankDeficient):
            fit_ols(rows)

    def test_exact_recovery(self):
        assert np.allclose(fit_ols(planted_rows()).vector, TRUTH, rtol=1e-9)

    def test_orthogonality(self):
        rows = planted_rows(noise=0.05)
        X, y = design_arrays(rows)
        r = y - X @ fit_ols(rows).vector
        assert np.all(np.abs(X.T @ r) < 1e-6 * np.linalg.norm(y) * np.abs(X).max())

    def test_common_scaling_invariance(self):
        rows = planted_rows(noise=0.05)
        scaled = [DesignRow(r.facility_id, 3 * r.y, 3 * r.x_low, 3 * r.x_med, 3 * r.x_high, 3 * r.x_inflow)
                  for r in rows]
        assert np.allclose(fit_ols(rows).vector, fit_ols(scaled).vector, rtol=1e-10)

    def test_diagnostics(self):
        p = fit_ols(planted_rows(noise=0.05))
        assert 0.9 < p.diagnostics.r2 <= 1
        assert p.diagnostics.condition_number > 1
        assert len(p.diagnostics.pct_deviation) == 60

    def test_nonpositive_is_finding(self):
        rows = planted_rows(truth=np.array([912.0, -5.0, 1562.0, 1126.0]))
        p = fit_ols(rows)
        assert [f.key for f in p.findings] == ["a_med"]

    def test_json_round_trip(self):
        p = fit_ols(planted_rows())
        q = CapitationParams.from_json(p.to_json())
        assert np.array_equal(p.vector, q.vector) and q.fit_method is FitMethod.OLS


class TestRobust:
    @pytest.mark.parametrize("method", ["huber", "ransac", "theilsen"])
    def test_clean_data_matches_ols(self, method):
        rows = planted_rows()
        assert np.allclose(fit_robust(rows, method, seed=1).vector, fit_ols(rows).vector, rtol=1e-4)

    @pytest.mark.parametrize("method", ["ransac", "theilsen"])
    def test_seeded_bit_identical(self, method):
        rows = planted_rows(noise=0.05)
        a = fit_robust(rows, method, seed=5).vector
        b = fit_robust(rows, method, seed=5).vector
        assert a.tobytes() == b.tobytes()

    def test_seed_required(self):
        with pytest.raises(ValueError):
            fit_robust(planted_rows(), "ransac")

    @pytest.mark.parametrize("method", ["huber", "ransac", "theilsen"])
    def test_outliers(self, method):
        rows = planted_rows(n=120, noise=0.03, seed=2)
        rows = [DesignRow(r.facility_id, r.y * 10, r.x_low, r.x_med, r.x_high, r.x_inflow) if i % 20 == 0 else r
                for i, r in enumerate(rows)]
        ols = np.linalg.norm(fit_ols(rows).vector - TRUTH)
        rob = np.linalg.norm(fit(rows, method, seed=3).vector - TRUTH)
        assert rob < ols


class TestHarness:
    def test_single_split(self):
        rep = robustness_harness(planted_rows(noise=0.05), n_splits=1, seed=0)
        assert np.all(rep.sd == 0)
        assert np.array_equal(rep.mean, rep.estimates[0])

    def test_noiseless_sd_zero(self):
        rep = robustness_harness(planted_rows(), n_splits=50, seed=0)
        assert np.all(rep.sd / rep.mean < 1e-6)

    def test_noisy_summary(self):
        rep = robustness_harness(planted_rows(noise=0.05), n_splits=100, seed=0)
        assert np.all(rep.sd > 0)
        assert np.all(rep.estimates.min(axis=0) <= rep.mean) and np.all(rep.mean <= rep.estimates.max(axis=0))
        assert list(rep.summary().parameter) == ["a_low", "a_med", "a_high", "b"]
        assert len(rep.splits_frame()) == 100

    def test_too_few_rows(self):
        from capitation.domain import DataError
        with pytest.raises(DataError):
            robustness_harness(planted_rows(n=10))

    def test_over_under(self):
        assert over_under(np.array([140.0, 100.0, 60.0, 130.0]), np.array([100.0] * 4), 0.3) == (1, 1)
