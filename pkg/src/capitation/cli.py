"""Command-line entry point: ``capitation <command> [options]``.

Exit status is 0 on success, 1 on data errors and 2 on usage errors.
Diagnostics go to standard error; results go to files under ``--out``
together with ``run_manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import svg
from .calibration import FitMethod, build_design, fit, robustness_harness
from .config import Config, ConfigError, load_config
from .domain import CapitationError, Finding, Period
from .ingest import DatasetBundle, IngestError, frame_to_csv_bytes, load_bundle, write_bundle
from .metrics import compute_metrics
from .monitoring import (
    FlagType,
    bhattacharyya_flags,
    compute_indicators,
    facility_ffs_gaps,
    flags_frame,
    indicators_report,
    iqr_flags,
)
from .payment import (
    PaymentLedger,
    compare_to_history,
    lines_frame,
    quarter_inputs,
    quarterly_schedule,
    results_frame,
)
from .segmentation import segment
from .stewardship import (
    abx_summary,
    antibiotic_shares,
    antihistamine_rate_by_category,
    cost_group_breakdown,
    pediatric_single_category_cohort,
    prescription_rate_by_category,
)
from .synthgen import GeneratorSpec, generate

COMMANDS = ("synth", "validate", "metrics", "segment", "calibrate", "robustness", "pay", "reconcile", "compare",
            "monitor", "abx")


class UsageError(Exception):
    pass


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Outputs:
    """Collects output files so the manifest can list their hashes."""

    def __init__(self, directory: Path):
        self.dir = directory
        self.files: dict[str, str] = {}

    def write_bytes(self, name: str, data: bytes) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / name).write_bytes(data)
        self.files[name] = _sha256(data)

    def csv(self, name: str, df: pd.DataFrame) -> None:
        self.write_bytes(name, frame_to_csv_bytes(df))

    def json(self, name: str, obj) -> None:
        self.write_bytes(name, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())

    def text(self, name: str, text: str) -> None:
        self.write_bytes(name, text.encode())


def _findings_frame(findings) -> pd.DataFrame:
    return pd.DataFrame([(f.code, f.entity, f.key, f.line if f.line is not None else "", f.message)
                         for f in findings], columns=["code", "entity", "key", "line", "message"])


def _need(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"{args.command} requires --{name.replace('_', '-')}")


def _period(args, cfg: Config) -> Period:
    try:
        return Period.parse(args.period, cfg.fiscal_year_anchor_month)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load(args, cfg: Config) -> DatasetBundle:
    _need(args, "input")
    return load_bundle(args.input, cfg)


def _params(args, out: Path):
    from .calibration import CapitationParams

    path = Path(args.params) if args.params else out / "params.json"
    if not path.exists():
        raise UsageError(f"{args.command} needs calibrated parameters (--params); {path} not found")
    return CapitationParams.from_json(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg, out: Outputs):
    spec = GeneratorSpec.from_file(args.spec) if args.spec else GeneratorSpec()
    if args.seed is not None:
        spec = spec.replace(seed=args.seed)
    bundle, truth = generate(spec)
    for name, info in write_bundle(bundle, out.dir).items():
        out.files[name] = info["sha256"]
    out.text("ground_truth.json", truth.to_json())
    return {}


def cmd_validate(args, cfg, out: Outputs):
    bundle = _load(args, cfg)
    report = bundle.validate()
    findings = sorted(list(report.findings) + list(bundle.quarantine))
    out.csv("validation.csv", _findings_frame(findings))
    rows = sum(len(getattr(bundle, k)) for k in ("facilities", "members", "visits", "cost_items", "code_map"))
    if len(findings) > cfg.quarantine_fraction * max(rows, 1):
        print(f"validation: {len(findings)} findings over {rows} rows exceed the allowed fraction",
              file=sys.stderr)
        return {"exit": 1}
    return {}


def cmd_metrics(args, cfg, out: Outputs):
    _need(args, "period")
    bundle = _load(args, cfg)
    res = compute_metrics(bundle, _period(args, cfg), cfg.ambulance_copay_rate)
    out.csv("metrics.csv", res.report_frame())
    out.csv("metrics_findings.csv", _findings_frame(res.findings))
    return {}


def _segment(args, cfg, bundle):
    period = _period(args, cfg)
    res = compute_metrics(bundle, period, cfg.ambulance_copay_rate)
    seg = segment(res.metrics, cfg.n_tiers, cfg.n_capture_groups)
    return period, res, seg


def cmd_segment(args, cfg, out: Outputs):
    _need(args, "period")
    _, _, seg = _segment(args, cfg, _load(args, cfg))
    out.csv("segmentation.csv", seg.to_frame())
    out.json("segmentation.json", seg.to_dict())
    return {}


def cmd_calibrate(args, cfg, out: Outputs):
    _need(args, "period")
    period, res, seg = _segment(args, cfg, _load(args, cfg))
    rows = build_design(res.metrics, seg)
    params = fit(rows, FitMethod(args.method), _seed(args, cfg), period.label, seg)
    out.text("params.json", params.to_json())
    out.csv("design.csv", pd.DataFrame([r.__dict__ for r in rows]))
    return {}


def _seed(args, cfg):
    return cfg.seed if args.seed is None else args.seed


def cmd_robustness(args, cfg, out: Outputs):
    _need(args, "period")
    _, res, seg = _segment(args, cfg, _load(args, cfg))
    rows = build_design(res.metrics, seg)
    tol = cfg.adjustment_threshold if args.threshold is None else args.threshold
    rep = robustness_harness(rows, cfg.n_splits, cfg.train_fraction, _seed(args, cfg), tol, FitMethod(args.method))
    out.csv("robustness_summary.csv", rep.summary())
    out.csv("robustness_splits.csv", rep.splits_frame())
    return {}


def cmd_pay(args, cfg, out: Outputs):
    _need(args, "period")
    bundle = _load(args, cfg)
    params = _params(args, out.dir)
    lines, findings = quarterly_schedule(params, bundle, _period(args, cfg), cfg.n_capture_groups,
                                         cfg.ambulance_copay_rate)
    out.csv("payments.csv", lines_frame(lines))
    out.csv("payment_findings.csv", _findings_frame(findings))
    return {}


def cmd_reconcile(args, cfg, out: Outputs):
    _need(args, "period")
    bundle = _load(args, cfg)
    params = _params(args, out.dir)
    fy = _period(args, cfg)
    tol = cfg.adjustment_threshold if args.threshold is None else args.threshold
    lines, findings = quarterly_schedule(params, bundle, fy, cfg.n_capture_groups, cfg.ambulance_copay_rate)
    ledger = PaymentLedger(lines, cfg.carry_forward_split)
    quarters = fy.quarters()
    if args.quarter:
        labels = [q.label for q in quarters]
        if args.quarter not in labels:
            raise UsageError(f"--quarter {args.quarter} is not in {fy.label}")
        quarters = quarters[:labels.index(args.quarter) + 1]
    for q in quarters:
        actual, f = quarter_inputs(params, bundle, q, fy, cfg.n_capture_groups, cfg.ambulance_copay_rate)
        findings.extend(f)
        ledger.reconcile(params, actual, q.label, tol)
    out.csv("payments_reconciled.csv", lines_frame(ledger.lines()))
    out.csv("reconciliation.csv", results_frame(ledger.results))
    out.csv("reconciliation_findings.csv", _findings_frame(sorted(findings + ledger.review)))
    return {}


def cmd_compare(args, cfg, out: Outputs):
    _need(args, "period")
    bundle = _load(args, cfg)
    params = _params(args, out.dir)
    res = compute_metrics(bundle, _period(args, cfg), cfg.ambulance_copay_rate)
    tol = cfg.adjustment_threshold if args.threshold is None else args.threshold
    rep = compare_to_history(params, res.metrics, tol)
    out.csv("variation.csv", rep.rows)
    out.csv("variation_histogram.csv", rep.histogram_frame())
    out.json("variation_summary.json", {"n_facilities": len(rep.rows), "n_over": rep.n_over,
                                        "n_under": rep.n_under, "share_underpaid": rep.share_underpaid,
                                        "tolerance": tol})
    if args.svg:
        out.text("variation.svg", svg.histogram(rep.bin_edges, rep.bin_counts,
                                                "Capitation vs historical cost", "relative variation",
                                                markers=(-tol, tol)))
    return {}


def cmd_monitor(args, cfg, out: Outputs):
    _need(args, "period")
    bundle = _load(args, cfg)
    period = _period(args, cfg)
    ind = compute_indicators(bundle, period)
    threshold = cfg.bhattacharyya_threshold if args.threshold is None else args.threshold
    flags, findings = [], []
    for scope in (FlagType.SELF_HISTORY, FlagType.DISTRICT_MONTH):
        f, fi = iqr_flags(ind, scope, multiplier=cfg.iqr_multiplier)
        flags += f
        findings += fi
    f, fi = bhattacharyya_flags(ind, cfg.bhattacharyya_bins, threshold)
    flags += f
    findings += fi
    out.csv("indicators.csv", indicators_report(ind))
    out.csv("flags.csv", flags_frame(flags))
    out.csv("monitor_findings.csv", _findings_frame(sorted(findings)))
    if args.params and args.quarter:
        params = _params(args, out.dir)
        gaps, gf = facility_ffs_gaps(params, bundle, Period.parse(params.calibration_period),
                                     Period.parse(args.quarter), cfg.ambulance_copay_rate)
        out.csv("ffs_gaps.csv", pd.DataFrame([g.row() for g in gaps]))
        out.csv("ffs_gap_findings.csv", _findings_frame(gf))
    return {}


def cmd_abx(args, cfg, out: Outputs):
    _need(args, "period")
    bundle = _load(args, cfg)
    period = _period(args, cfg)
    cohort = pediatric_single_category_cohort(bundle, cfg.age_cutoff, period=period)
    rates = prescription_rate_by_category(cohort, cfg.min_category_visits)
    ah = antihistamine_rate_by_category(cohort, cfg.min_category_visits)
    shares = antibiotic_shares(cohort)
    res = compute_metrics(bundle, period, cfg.ambulance_copay_rate)
    groups = cost_group_breakdown(cohort, res.metrics, cfg.n_cost_groups)
    out.csv("abx_rates.csv", rates.rates)
    out.csv("abx_boxplot.csv", rates.boxplots)
    out.csv("antihistamine_rates.csv", ah.rates)
    out.csv("abx_shares.csv", shares)
    out.csv("abx_cost_groups.csv", groups)
    out.csv("abx_findings.csv", _findings_frame(rates.findings))
    out.json("abx_summary.json", abx_summary(cohort, rates, shares))
    if args.svg:
        out.text("abx_boxplot.svg", svg.boxplots(rates.boxplots.to_dict("records"), list(rates.boxplots.category),
                                                 "Pediatric antibiotic prescription rate"))
        out.text("abx_frequency.svg", svg.bars(list(shares.item_code), list(shares.frequency_share),
                                               "Antibiotic prescriptions", "share"))
        out.text("abx_cost.svg", svg.bars(list(shares.item_code), list(shares.cost_share),
                                          "Antibiotic cost", "share"))
    return {}


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--in", dest="input", help="input bundle directory")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", help="key = value config file (default: $CAPITA_CONFIG)")
    common.add_argument("--seed", type=int)
    common.add_argument("--period", help="FY2024, 2023, 2024-Q3 or YYYY-MM:YYYY-MM")
    common.add_argument("--quarter", help="YYYY-Qn")
    common.add_argument("--method", choices=[m.value for m in FitMethod], default="ols")
    common.add_argument("--threshold", type=float)
    common.add_argument("--params", help="params.json from calibrate")
    common.add_argument("--spec", help="generator spec file (synth)")
    common.add_argument("--svg", action="store_true", help="also write SVG charts")

    parser = argparse.ArgumentParser(prog="capitation", description="Capitation payment engine")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HANDLERS[name].__name__.replace("cmd_", ""))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.perf_counter()
    out = Outputs(Path(args.out))
    try:
        cfg = load_config(args.config)
        status = HANDLERS[args.command](args, cfg, out).get("exit", 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"capitation: error: {exc}", file=sys.stderr)
        return 2
    except (CapitationError, ConfigError, IngestError, OSError, ValueError) as exc:
        print(f"capitation {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    manifest = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config_hash": cfg.digest(),
        "seed": args.seed,
        "inputs": _input_manifest(args),
        "outputs": [{"file": k, "sha256": v} for k, v in sorted(out.files.items())],
        "wall_time_seconds": round(time.perf_counter() - started, 3),
    }
    out.dir.mkdir(parents=True, exist_ok=True)
    (out.dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return status


def _input_manifest(args) -> dict:
    if not args.input:
        return {}
    files = {}
    for name in ("facilities.csv", "members.csv", "visits.csv", "cost_items.csv", "code_map.csv"):
        path = Path(args.input) / name
        if path.exists():
            files[name] = _sha256(path.read_bytes())
    return files


if __name__ == "__main__":
    sys.exit(main())
