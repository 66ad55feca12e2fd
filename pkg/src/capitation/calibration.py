"""Fitting the tier parameters A and the inflow parameter B.

The model has no intercept: for each Health Center

    cost = A_tier * (U * M) + B * I

so the design matrix has one column per tier (only the facility's own tier
column is non-zero) plus the inflow column.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from .domain import CapitationError, DataError, Finding
from .metrics import FacilityMetrics
from .rng import CounterRNG
from .segmentation import TIERS, SegmentationResult, Tier, lookup_U

RANK_TOL = 1e-10
HUBER_C = 1.345
MAD_NORMAL = 0.6745


class FitMethod(str, Enum):
    OLS = "ols"
    HUBER = "huber"
    RANSAC = "ransac"
    THEIL_SEN = "theilsen"


class CalibrationError(CapitationError):
    pass


class RankDeficient(CalibrationError):
    pass


class NonConvergence(CalibrationError):
    pass


class NoConsensus(CalibrationError):
    pass


class InconsistentCoverage(DataError):
    pass


@dataclass(frozen=True)
class DesignRow:
    facility_id: str
    y: float  # annualized cost, RWF
    x_low: float
    x_med: float
    x_high: float
    x_inflow: float


def build_design(metrics: Sequence[FacilityMetrics], segmentation: SegmentationResult) -> list[DesignRow]:
    ids = {m.facility_id for m in metrics}
    if ids != set(segmentation.tiers):
        raise InconsistentCoverage(
            f"{len(ids - set(segmentation.tiers))} facilities lack segmentation, "
            f"{len(set(segmentation.tiers) - ids)} segmented facilities lack metrics"
        )
    rows = []
    for m in sorted(metrics, key=lambda m: m.facility_id):
        um = lookup_U(m.facility_id, segmentation) * m.member_count
        tier = segmentation.tiers[m.facility_id]
        rows.append(DesignRow(
            m.facility_id, m.annualized_cost,
            um if tier is Tier.LOW else 0.0,
            um if tier is Tier.MEDIUM else 0.0,
            um if tier is Tier.HIGH else 0.0,
            m.inflow,
        ))
    return rows


def design_arrays(rows: Sequence[DesignRow]) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([[r.x_low, r.x_med, r.x_high, r.x_inflow] for r in rows], dtype=np.float64).reshape(-1, 4)
    y = np.array([r.y for r in rows], dtype=np.float64)
    return X, y


@dataclass(frozen=True)
class FitDiagnostics:
    r2: float
    condition_number: float
    n_rows: int
    pct_deviation: dict = field(default_factory=dict)
    iterations: int = 0
    n_inliers: int = 0


@dataclass(frozen=True)
class CapitationParams:
    """Calibrated A per tier and B, with the segmentation they were fitted on."""

    a_low: float
    a_med: float
    a_high: float
    b: float
    fit_method: FitMethod = FitMethod.OLS
    calibration_period: str = ""
    segmentation: Optional[SegmentationResult] = None
    diagnostics: Optional[FitDiagnostics] = None
    findings: tuple = ()

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.a_low, self.a_med, self.a_high, self.b])

    def a_for(self, tier: Tier) -> float:
        return {Tier.LOW: self.a_low, Tier.MEDIUM: self.a_med, Tier.HIGH: self.a_high}[Tier(tier)]

    def scaled(self, factor: float) -> "CapitationParams":
        a_l, a_m, a_h, b = self.vector * factor
        return CapitationParams(a_l, a_m, a_h, b, self.fit_method, self.calibration_period, self.segmentation)

    def to_json(self) -> str:
        d = {
            "a_low": self.a_low, "a_med": self.a_med, "a_high": self.a_high, "b": self.b,
            "method": self.fit_method.value, "period": self.calibration_period,
            "diagnostics": {
                "r2": self.diagnostics.r2 if self.diagnostics else None,
                "condition_number": self.diagnostics.condition_number if self.diagnostics else None,
            },
        }
        if self.segmentation is not None:
            d["segmentation"] = self.segmentation.to_dict()
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CapitationParams":
        d = json.loads(text)
        seg = SegmentationResult.from_dict(d["segmentation"]) if "segmentation" in d else None
        diag = d.get("diagnostics") or {}
        return cls(d["a_low"], d["a_med"], d["a_high"], d["b"], FitMethod(d["method"]), d.get("period", ""),
                   seg, FitDiagnostics(diag.get("r2"), diag.get("condition_number"), 0))


def _check_rank(N: np.ndarray) -> None:
    eig = np.linalg.eigvalsh(N)
    if eig[-1] <= 0 or eig[0] <= RANK_TOL * eig[-1]:
        raise RankDeficient("normal matrix is singular; every tier and the inflow column need support")


def solve_normal(X: np.ndarray, y: np.ndarray, w: Optional[np.ndarray] = None) -> np.ndarray:
    """Least squares via the normal equations and a Cholesky solve."""
    Xw = X if w is None else X * w[:, None]
    N = Xw.T @ X
    _check_rank(N)
    return linalg.cho_solve(linalg.cho_factor(N), Xw.T @ y)


def _diagnostics(rows, X, y, beta, **extra) -> FitDiagnostics:
    pred = X @ beta
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        pct = {r.facility_id: float((p - r.y) / r.y) for r, p in zip(rows, pred) if r.y}
    return FitDiagnostics(r2, float(np.linalg.cond(X)), len(rows), pct, **extra)


def _params(beta, method, rows, X, y, period="", segmentation=None, **extra) -> CapitationParams:
    findings = tuple(
        Finding("NonPositiveParameter", "params", name, f"{name} = {value:.6g}")
        for name, value in zip(("a_low", "a_med", "a_high", "b"), beta) if not value > 0
    )
    if not np.all(np.isfinite(beta)):
        raise CalibrationError("fit produced non-finite parameters")
    return CapitationParams(*map(float, beta), fit_method=method, calibration_period=period,
                            segmentation=segmentation, diagnostics=_diagnostics(rows, X, y, beta, **extra),
                            findings=findings)


def fit_ols(rows: Sequence[DesignRow], period: str = "", segmentation=None) -> CapitationParams:
    """No-intercept ordinary least squares."""
    X, y = design_arrays(rows)
    if len(rows) < 4:
        raise RankDeficient(f"need at least 4 rows, got {len(rows)}")
    beta = solve_normal(X, y)
    return _params(beta, FitMethod.OLS, rows, X, y, period, segmentation)


def mad(r: np.ndarray) -> float:
    """Median absolute deviation about the median (unscaled)."""
    return float(np.median(np.abs(r - np.median(r))))


def _huber(rows, X, y, c=HUBER_C, tol=1e-8, max_iter=100):
    beta = solve_normal(X, y)
    floor = 1e-12 * max(float(np.max(np.abs(y))), 1.0)
    for it in range(1, max_iter + 1):
        r = y - X @ beta
        scale = mad(r) / MAD_NORMAL
        if scale <= floor:
            return beta, it
        a = np.abs(r) / scale
        w = np.where(a <= c, 1.0, c / np.maximum(a, 1e-300))
        new = solve_normal(X, y, w)
        if np.linalg.norm(new - beta) <= tol * max(np.linalg.norm(beta), 1e-300):
            return new, it
        beta = new
    raise NonConvergence(f"Huber IRLS did not converge in {max_iter} iterations")


def _minimal_solves(X, y, rng: CounterRNG, n_draws: int):
    """Exact 4-row solutions for ``n_draws`` random subsets; singular draws are dropped."""
    n = len(y)
    keys = rng.uniform((n_draws, n))
    idx = np.argsort(keys, axis=1, kind="stable")[:, :4]
    A = X[idx]
    b = y[idx]
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(A)
    ok = np.isfinite(cond) & (cond < 1e12)
    sol = np.full((n_draws, 4), np.nan)
    if ok.any():
        sol[ok] = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
    return sol, ok


def _ransac(rows, X, y, seed, n_iter=1000, min_inliers=8):
    ols = solve_normal(X, y)
    thr = 2.0 * mad(y - X @ ols)
    thr = max(thr, 1e-9 * max(float(np.max(np.abs(y))), 1.0))
    sol, ok = _minimal_solves(X, y, CounterRNG(seed, "ransac"), n_iter)
    best_count, best_mask = -1, None
    for i in np.flatnonzero(ok):
        mask = np.abs(y - X @ sol[i]) <= thr
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None or best_count < min_inliers:
        raise NoConsensus(f"best consensus set has {max(best_count, 0)} rows, need {min_inliers}")
    return solve_normal(X[best_mask], y[best_mask]), best_count


def _theil_sen(rows, X, y, seed, n_draws=2000):
    sol, ok = _minimal_solves(X, y, CounterRNG(seed, "theilsen"), n_draws)
    if not ok.any():
        raise RankDeficient("no non-singular 4-row subsets")
    return np.median(sol[ok], axis=0), int(ok.sum())


def fit_robust(rows: Sequence[DesignRow], method, seed: Optional[int] = None, period: str = "",
               segmentation=None) -> CapitationParams:
    """Huber IRLS, RANSAC or Theil-Sen (random 4-row subsets) estimates."""
    method = FitMethod(method)
    if method is FitMethod.OLS:
        return fit_ols(rows, period, segmentation)
    X, y = design_arrays(rows)
    if len(rows) < 4:
        raise RankDeficient(f"need at least 4 rows, got {len(rows)}")
    if method is FitMethod.HUBER:
        beta, iters = _huber(rows, X, y)
        return _params(beta, method, rows, X, y, period, segmentation, iterations=iters)
    if seed is None:
        raise ValueError(f"{method.value} needs a seed")
    if method is FitMethod.RANSAC:
        beta, n_in = _ransac(rows, X, y, seed)
        return _params(beta, method, rows, X, y, period, segmentation, n_inliers=n_in)
    beta, n_ok = _theil_sen(rows, X, y, seed)
    return _params(beta, method, rows, X, y, period, segmentation, iterations=n_ok)


def fit(rows, method=FitMethod.OLS, seed=None, period="", segmentation=None) -> CapitationParams:
    return fit_robust(rows, method, seed, period, segmentation)


# ---------------------------------------------------------------------------
# repeated train/test splits
# ---------------------------------------------------------------------------

PARAM_NAMES = ("a_low", "a_med", "a_high", "b")


@dataclass(frozen=True)
class RobustnessReport:
    n_splits: int
    seed: int
    train_fraction: float
    tolerance: float
    estimates: np.ndarray  # (n_splits, 4)
    test_over: np.ndarray  # per split
    test_under: np.ndarray
    test_size: int
    full_fit: CapitationParams
    mean_model_over: int
    mean_model_under: int
    failed_splits: int = 0

    @property
    def mean(self) -> np.ndarray:
        return self.estimates.mean(axis=0)

    @property
    def sd(self) -> np.ndarray:
        if len(self.estimates) < 2:
            return np.zeros(4)
        return self.estimates.std(axis=0, ddof=1)

    def summary(self) -> pd.DataFrame:
        return pd.DataFrame({
            "parameter": PARAM_NAMES,
            "mean": self.mean,
            "sd": self.sd,
            "full_fit": self.full_fit.vector,
        })

    def splits_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.estimates, columns=PARAM_NAMES)
        df.insert(0, "split", np.arange(len(df)))
        df["test_over"] = self.test_over
        df["test_under"] = self.test_under
        return df


def over_under(pred: np.ndarray, y: np.ndarray, tolerance: float) -> tuple[int, int]:
    """Counts of predictions above/below actual by more than ``tolerance`` (relative)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = (pred - y) / y
    valid = y > 0
    return int(np.sum(valid & (rel > tolerance))), int(np.sum(valid & (rel < -tolerance)))


def robustness_harness(rows: Sequence[DesignRow], n_splits: int = 500, train_fraction: float = 0.8,
                       seed: int = 0, tolerance: float = 0.30, method=FitMethod.OLS) -> RobustnessReport:
    """Refit on random train subsets and count test over/under-payments."""
    if len(rows) < 20:
        raise DataError(f"robustness harness needs at least 20 rows, got {len(rows)}")
    X, y = design_arrays(rows)
    n = len(rows)
    n_train = int(round(train_fraction * n))
    root = CounterRNG(seed, "splits")
    estimates, over, under = [], [], []
    failed = 0
    method = FitMethod(method)
    for s in range(n_splits):
        perm = root.spawn(s).permutation(n)
        train, test = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        try:
            if method is FitMethod.OLS:
                beta = solve_normal(X[train], y[train])
            else:
                beta = fit_robust([rows[i] for i in train], method, seed=seed + s).vector
        except CalibrationError:
            failed += 1
            continue
        o, u = over_under(X[test] @ beta, y[test], tolerance)
        estimates.append(beta)
        over.append(o)
        under.append(u)
    full = fit_robust(rows, method, seed=seed)
    est = np.array(estimates).reshape(-1, 4)
    mo, mu = over_under(X @ est.mean(axis=0), y, tolerance)
    return RobustnessReport(n_splits, seed, train_fraction, tolerance, est, np.array(over), np.array(under),
                            n - n_train, full, mo, mu, failed)
