"""Experiment report rows and table emission.

A row aggregates one grid cell: (species-or-mixed label, backbone,
class count, training fraction) with both approaches' test accuracy,
training time, epochs, parameter counts, and the accuracy gain in both
percentage-point and relative form. Text output mirrors the usual
species x CNN x classes x training-set-size table layout; csv renders
numerics at one decimal; json is lossless and fully reconstructible.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .errors import ValidationError

SCHEMA = "clshead-report/1"

# Fields that legitimately differ between two otherwise identical runs.
TIMING_FIELDS = (
    "tt_baseline_s",
    "tt_proposed_s",
    "tt_reduction_pct",
    "tt_speedup",
    "tt_baseline_runs",
    "tt_proposed_runs",
)

_NUMERIC_FIELDS = (
    "similarity_pct",
    "ta_baseline",
    "ta_proposed",
    "ta_baseline_std",
    "ta_proposed_std",
    "gain_pp",
    "gain_rel_pct",
    "tt_baseline_s",
    "tt_proposed_s",
    "tt_reduction_pct",
    "tt_speedup",
    "epochs_baseline",
    "epochs_proposed",
)


@dataclass
class ReportRow:
    kind_label: str
    backbone: str
    n_classes: int
    f: float
    similarity_pct: float | None = None
    ta_baseline: float | None = None
    ta_proposed: float | None = None
    ta_baseline_std: float | None = None
    ta_proposed_std: float | None = None
    gain_pp: float | None = None
    gain_rel_pct: float | None = None
    tt_baseline_s: float | None = None
    tt_proposed_s: float | None = None
    tt_reduction_pct: float | None = None
    tt_speedup: float | None = None
    epochs_baseline: float | None = None
    epochs_proposed: float | None = None
    params_baseline: int | None = None
    params_proposed: int | None = None
    tt_baseline_runs: list[float] = field(default_factory=list)
    tt_proposed_runs: list[float] = field(default_factory=list)
    repeats: int = 1


@dataclass
class ExperimentReport:
    rows: list[ReportRow]
    seed: int = 0
    threads: int = 1

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "seed": self.seed,
            "threads": self.threads,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentReport":
        if doc.get("schema") != SCHEMA:
            raise ValidationError(f"unknown report schema {doc.get('schema')!r}")
        return cls(
            rows=[ReportRow(**row) for row in doc["rows"]],
            seed=doc["seed"],
            threads=doc["threads"],
        )

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls.from_dict(json.loads(text))

    def without_timing(self) -> "ExperimentReport":
        """Copy with wall-clock fields cleared, for determinism comparisons."""
        cleared = {f: None for f in TIMING_FIELDS if not f.endswith("_runs")}
        cleared.update({f: [] for f in TIMING_FIELDS if f.endswith("_runs")})
        return ExperimentReport(
            rows=[replace(r, **cleared) for r in self.rows],
            seed=self.seed,
            threads=self.threads,
        )


def average_row(rows: list[ReportRow]) -> ReportRow:
    """Unweighted float64 mean of every numeric field over the given rows."""
    if not rows:
        raise ValidationError("cannot average an empty report")
    avg = ReportRow(
        kind_label="Average",
        backbone="-",
        n_classes=0,
        f=float(np.mean([r.f for r in rows])),
        repeats=rows[0].repeats,
    )
    for name in _NUMERIC_FIELDS:
        vals = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        if vals:
            setattr(avg, name, float(np.mean(np.asarray(vals, dtype=np.float64))))
    return avg


def _fmt(value, spec: str = "{:.1f}") -> str:
    if value is None:
        return "-"
    return spec.format(value)


def _fmt_tt(value) -> str:
    # training times carry two significant digits
    return "-" if value is None else f"{value:.2g}"


def render_text(report: ExperimentReport) -> str:
    out = io.StringIO()
    rows = report.rows
    by_f = sorted({r.f for r in rows})

    for f in by_f:
        sub = [r for r in rows if r.f == f]
        class_counts = sorted({r.n_classes for r in sub})
        print(f"TA (%) by approach, f={f:g} ({sub[0].repeats} repeat(s))", file=out)
        header = f"{'Species':<10} {'CNN':<10} {'Sim':>6}"
        for c in class_counts:
            header += f" | {c} cls: {'Base':>6} {'P':>6} {'Gain':>12}"
        print(header, file=out)
        print("-" * len(header), file=out)
        keys = []
        for r in sub:
            k = (r.kind_label, r.backbone)
            if k not in keys:
                keys.append(k)
        for label, backbone in keys:
            cells = {r.n_classes: r for r in sub if (r.kind_label, r.backbone) == (label, backbone)}
            sim = next((r.similarity_pct for r in cells.values() if r.similarity_pct is not None), None)
            line = f"{label:<10} {backbone:<10} {_fmt(sim):>6}"
            for c in class_counts:
                r = cells.get(c)
                if r is None:
                    line += f" | {'-':>6} {'-':>6} {'-':>12}" if False else f" |        {'-':>6} {'-':>6} {'-':>12}"
                else:
                    gain = (
                        f"{_fmt(r.gain_pp, '{:+.1f}')}pp/{_fmt(r.gain_rel_pct, '{:+.1f}')}%"
                        if r.gain_pp is not None
                        else "-"
                    )
                    line += f" |        {_fmt(r.ta_baseline):>6} {_fmt(r.ta_proposed):>6} {gain:>12}"
            print(line, file=out)
        avg = average_row(sub)
        gain = (
            f"{_fmt(avg.gain_pp, '{:+.1f}')}pp/{_fmt(avg.gain_rel_pct, '{:+.1f}')}%"
            if avg.gain_pp is not None
            else "-"
        )
        print(
            f"{'Average':<10} {'-':<10} {_fmt(avg.similarity_pct):>6} |        "
            f"{_fmt(avg.ta_baseline):>6} {_fmt(avg.ta_proposed):>6} {gain:>12}",
            file=out,
        )
        print(file=out)

    timed = [r for r in rows if r.tt_baseline_s is not None or r.tt_proposed_s is not None]
    if timed:
        print("TT (s) by approach", file=out)
        header = f"{'CNN':<10} {'Species':<10} {'Classes':>7}"
        for f in by_f:
            header += f" | f={f:<4g} {'Base':>8} {'P':>8}"
        print(header, file=out)
        print("-" * len(header), file=out)
        keys = []
        for r in timed:
            k = (r.backbone, r.kind_label, r.n_classes)
            if k not in keys:
                keys.append(k)
        for backbone, label, c in keys:
            line = f"{backbone:<10} {label:<10} {c:>7}"
            for f in by_f:
                r = next(
                    (
                        x
                        for x in timed
                        if (x.backbone, x.kind_label, x.n_classes, x.f) == (backbone, label, c, f)
                    ),
                    None,
                )
                if r is None:
                    line += f" |        {'-':>8} {'-':>8}"
                else:
                    line += f" |        {_fmt_tt(r.tt_baseline_s):>8} {_fmt_tt(r.tt_proposed_s):>8}"
            print(line, file=out)
        avg = average_row(timed)
        line = f"{'Average':<10} {'-':<10} {'-':>7}"
        line += f" |        {_fmt_tt(avg.tt_baseline_s):>8} {_fmt_tt(avg.tt_proposed_s):>8}"
        print(line, file=out)
        if avg.tt_baseline_s and avg.tt_proposed_s:
            reduction = 100.0 * (1.0 - avg.tt_proposed_s / avg.tt_baseline_s)
            speedup = avg.tt_baseline_s / avg.tt_proposed_s
            print(
                f"{'Reduction':<10} {'-':<10} {'-':>7} |        "
                f"{reduction:>7.1f}% {speedup:>6.1f}x",
                file=out,
            )
    return out.getvalue()


def render_csv(report: ExperimentReport) -> str:
    out = io.StringIO()
    cols = [f.name for f in fields(ReportRow) if not f.name.endswith("_runs")]
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(cols)

    def cell(row, name):
        v = getattr(row, name)
        if v is None:
            return ""
        if name in _NUMERIC_FIELDS or name == "f":
            return f"{v:.1f}"
        return v

    for row in report.rows:
        writer.writerow([cell(row, c) for c in cols])
    writer.writerow([cell(average_row(report.rows), c) for c in cols])
    return out.getvalue()


def emit_tables(report: ExperimentReport, fmt: str = "text") -> str:
    if not report.rows:
        raise ValidationError("cannot emit an empty report")
    if fmt == "text":
        return render_text(report)
    if fmt == "csv":
        return render_csv(report)
    if fmt == "json":
        return report.to_json()
    raise ValidationError(f"unknown format {fmt!r}; use text, csv or json")
