"""Robustness metrics from prediction files: CE, mCE, rCE and dice.

Error rates are fractions internally and only rendered as percentages;
mCE for a corruption is the model's CE summed over the five severities,
normalized by the same sum for a baseline model and scaled to 100, so a
model evaluated against itself scores exactly 100.0.  rCE is the mean
corrupted error over the clean error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import severity as sev

PREDICTION_FIELDS = ("sample_id", "kind", "severity", "true_label", "predicted_label")

# Report row order mirrors the benchmark grouping: stain family, then
# deformation + coverage, then optical.
REPORT_GROUPS = (
    ("stain", sev.STAIN_KINDS),
    ("deformation/coverage", sev.COVERAGE_KINDS + sev.DEFORMATION_KINDS),
    ("optical", sev.OPTICAL_KINDS),
)


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    kind: str  # corruption identifier or "clean"
    severity: int  # 0 iff kind == "clean"
    true_label: int
    predicted_label: int

    def __post_init__(self):
        if (self.severity == 0) != (self.kind == "clean"):
            raise ValueError("severity 0 is reserved for kind 'clean'")


@dataclass
class MetricReport:
    clean_error: float
    ce: dict  # (kind, severity) -> fraction
    mce: dict  # kind -> percentage or None where baseline CE sums to 0
    rce: dict  # kind -> ratio or None where clean error is 0
    mce_average: float | None
    rce_average: float | None
    dice: dict = field(default_factory=dict)  # (kind, severity) -> mean dice


def load_predictions(path) -> list[PredictionRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != PREDICTION_FIELDS:
            raise ValueError(
                f"prediction file must have header {','.join(PREDICTION_FIELDS)}"
            )
        return [
            PredictionRecord(
                row["sample_id"],
                row["kind"],
                int(row["severity"]),
                int(row["true_label"]),
                int(row["predicted_label"]),
            )
            for row in reader
        ]


def compute_ce(records) -> float:
    """Misclassified fraction of a record set."""
    records = list(records)
    if not records:
        raise ValueError("no records")
    wrong = sum(1 for r in records if r.predicted_label != r.true_label)
    return wrong / len(records)


def ce_by_cell(records) -> dict:
    """CE per (kind, severity) cell, including ('clean', 0)."""
    cells = {}
    for r in records:
        cells.setdefault((r.kind, r.severity), []).append(r)
    return {key: compute_ce(group) for key, group in cells.items()}


def compute_mce(model_ces, baseline_ces, kind) -> float | None:
    """100 * sum_s CE_model / sum_s CE_baseline; None when undefined."""
    model = [model_ces[(kind, s)] for s in sev.SEVERITIES]
    baseline = [baseline_ces[(kind, s)] for s in sev.SEVERITIES]
    denom = sum(baseline)
    if denom <= 0:
        return None
    return 100.0 * sum(model) / denom


def compute_rce(model_ces, kind, clean_error) -> float | None:
    """(mean CE over the 5 severities) / clean error; None when undefined."""
    if clean_error <= 0:
        return None
    mean_ce = sum(model_ces[(kind, s)] for s in sev.SEVERITIES) / len(sev.SEVERITIES)
    return mean_ce / clean_error


def compute_dice(pred_mask, gt_mask) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask dimensions differ: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def build_report(model_records, baseline_records, dice=None) -> MetricReport:
    model_ces = ce_by_cell(model_records)
    baseline_ces = ce_by_cell(baseline_records)
    if ("clean", 0) not in model_ces:
        raise ValueError("model predictions contain no clean records")
    clean_error = model_ces[("clean", 0)]

    kinds = sorted(
        {k for (k, s) in model_ces if k != "clean"},
        key=lambda k: sev.KINDS.index(k) if k in sev.KINDS else len(sev.KINDS),
    )
    mce, rce = {}, {}
    for kind in kinds:
        have_model = all((kind, s) in model_ces for s in sev.SEVERITIES)
        have_base = all((kind, s) in baseline_ces for s in sev.SEVERITIES)
        mce[kind] = (
            compute_mce(model_ces, baseline_ces, kind)
            if have_model and have_base
            else None
        )
        rce[kind] = (
            compute_rce(model_ces, kind, clean_error) if have_model else None
        )

    defined_mce = [v for v in mce.values() if v is not None]
    defined_rce = [v for v in rce.values() if v is not None]
    return MetricReport(
        clean_error=clean_error,
        ce={k: v for k, v in model_ces.items() if k[0] != "clean"},
        mce=mce,
        rce=rce,
        mce_average=sum(defined_mce) / len(defined_mce) if defined_mce else None,
        rce_average=sum(defined_rce) / len(defined_rce) if defined_rce else None,
        dice=dict(dice or {}),
    )


def _fmt(value, digits=4):
    return "n/a" if value is None else f"{value:.{digits}f}"


def _report_rows(report: MetricReport):
    rows = []
    for _, kinds in REPORT_GROUPS:
        for kind in kinds:
            if kind in report.mce or kind in report.rce:
                rows.append((kind, report.mce.get(kind), report.rce.get(kind)))
    # Kinds outside the canonical list still get a row.
    known = {kind for _, kinds in REPORT_GROUPS for kind in kinds}
    for kind in report.mce:
        if kind not in known:
            rows.append((kind, report.mce.get(kind), report.rce.get(kind)))
    rows.append(("Average", report.mce_average, report.rce_average))
    return rows


def emit_report(report: MetricReport, out_dir, name="report"):
    """Write the report as CSV plus an aligned plain-text table."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = _report_rows(report)

    csv_path = out_dir / f"{name}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "mce", "rce"])
        for kind, mce, rce in rows:
            writer.writerow(
                [kind, "" if mce is None else repr(mce), "" if rce is None else repr(rce)]
            )
        writer.writerow(["clean_error", repr(report.clean_error), ""])

    width = max(len(r[0]) for r in rows) + 2
    lines = [f"{'OmniCE':<{width}}{'mCE':>10}{'rCE':>10}"]
    for kind, mce, rce in rows:
        lines.append(f"{kind:<{width}}{_fmt(mce, 1):>10}{_fmt(rce, 2):>10}")
    lines.append(f"{'clean error':<{width}}{report.clean_error:>10.4f}")
    txt_path = out_dir / f"{name}.txt"
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return csv_path, txt_path


def parse_report_csv(path) -> dict:
    """Reparse an emitted CSV back into {kind: (mce, rce)} plus clean error."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            kind = row["kind"]
            if kind == "clean_error":
                out["clean_error"] = float(row["mce"])
                continue
            mce = float(row["mce"]) if row["mce"] else None
            rce = float(row["rce"]) if row["rce"] else None
            out[kind] = (mce, rce)
    return out
