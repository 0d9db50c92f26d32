"""Summary tables over per-frame metrics, and the plain-text report."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass

SCOPES = ("vehicle", "infra", "pooled")
METRICS = ("psnr_full", "ssim_full", "psnr_dyn", "ssim_dyn")


@dataclass(frozen=True)
class MetricRow:
    experiment_id: str
    mode: str
    delta_tau: float
    frame: int
    source: str
    psnr_full: float
    ssim_full: float
    psnr_dyn: float | None
    ssim_dyn: float | None

    COLUMNS = ["experiment_id", "mode", "delta_tau", "frame", "source", "psnr_full", "ssim_full", "psnr_dyn", "ssim_dyn"]

    def as_list(self) -> list:
        return [getattr(self, c) for c in self.COLUMNS]


@dataclass(frozen=True)
class CheckResult:
    name: str
    measured: float
    expected: float
    tolerance: float
    passed: bool
    note: str = ""


@dataclass
class SummaryRow:
    mode: str
    delta_tau: float
    scope: str
    rows: int
    inf_excluded: int  # rows whose PSNR was the +inf sentinel, left out of the PSNR means
    psnr_full: float | None
    ssim_full: float | None
    psnr_dyn: float | None
    ssim_dyn: float | None
    gap_psnr_full: float | None = None
    gap_ssim_full: float | None = None
    gap_psnr_dyn: float | None = None
    gap_ssim_dyn: float | None = None

    COLUMNS = [
        "mode",
        "delta_tau",
        "scope",
        "rows",
        "inf_excluded",
        "psnr_full",
        "ssim_full",
        "psnr_dyn",
        "ssim_dyn",
        "gap_psnr_full",
        "gap_ssim_full",
        "gap_psnr_dyn",
        "gap_ssim_dyn",
    ]

    def as_list(self) -> list:
        return [getattr(self, c) for c in self.COLUMNS]


def _finite(v) -> bool:
    return v is not None and math.isfinite(v)


def _mean(vals) -> tuple[float | None, int]:
    v = sorted(x for x in vals if _finite(x))  # sorted: order-independent summation
    return (math.fsum(v) / len(v) if v else None), len(v)


def aggregate(rows) -> list[SummaryRow]:
    """Means per (mode, delta_tau) for each source and pooled; gaps are dust minus single."""
    rows = list(rows)
    if not rows:
        raise ValueError("no metric rows to aggregate")
    groups = defaultdict(list)
    for r in rows:
        groups[(r.mode, r.delta_tau, r.source)].append(r)
        groups[(r.mode, r.delta_tau, "pooled")].append(r)
    out = {}
    for (mode, dt, scope), rs in groups.items():
        vals = {m: _mean(getattr(r, m) for r in rs)[0] for m in METRICS}
        n_inf = sum(1 for r in rs if r.psnr_full == math.inf or r.psnr_dyn == math.inf)
        out[(mode, dt, scope)] = SummaryRow(mode, dt, scope, len(rs), n_inf, **vals)
    for (mode, dt, scope), s in out.items():
        d, sg = out.get(("dust", dt, scope)), out.get(("single", dt, scope))
        if d is None or sg is None:
            continue
        for m in METRICS:
            a, b = getattr(d, m), getattr(sg, m)
            setattr(s, "gap_" + m, a - b if a is not None and b is not None else None)
    scope_rank = {s: i for i, s in enumerate(SCOPES)}
    return sorted(out.values(), key=lambda s: (s.delta_tau, s.mode, scope_rank.get(s.scope, 99), s.scope))


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        if math.isnan(x):
            return "nan"
        return f"{x:.6f}"
    return str(x)


def summary_csv(summaries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SummaryRow.COLUMNS)
    for s in summaries:
        w.writerow([_fmt(x) for x in s.as_list()])
    return buf.getvalue()


def _g(x: float) -> str:
    return _fmt(x) if math.isinf(x) or math.isnan(x) else f"{x:.6g}"


def theory_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "measured", "expected", "tolerance", "pass"])
    for r in results:
        w.writerow([r.name, _g(float(r.measured)), _g(float(r.expected)), _g(float(r.tolerance)), "pass" if r.passed else "fail"])
    return buf.getvalue()


def emit_report(summaries, theory_results=()) -> tuple[str, str]:
    """(report text, summary CSV). Either section may be empty."""
    lines = ["dustgsg experiment report", ""]
    summaries = list(summaries)
    if summaries:
        lines.append("Reconstruction metrics (means over frames; gap = dust - single, positive favours dust)")
        lines.append("PSNR rows equal to +inf are excluded from means and counted in inf_excluded.")
        hdr = f"{'mode':<7}{'dtau_s':>8} {'scope':<8}{'rows':>5}{'inf':>4}{'psnr_full':>11}{'ssim_full':>11}{'psnr_dyn':>11}{'ssim_dyn':>11}{'gap_psnr_dyn':>14}"
        lines.append(hdr)
        for s in summaries:
            lines.append(
                f"{s.mode:<7}{s.delta_tau:>8.3f} {s.scope:<8}{s.rows:>5}{s.inf_excluded:>4}"
                f"{_fmt(s.psnr_full):>11}{_fmt(s.ssim_full):>11}{_fmt(s.psnr_dyn):>11}{_fmt(s.ssim_dyn):>11}{_fmt(s.gap_psnr_dyn):>14}"
            )
        lines.append("")
    theory_results = list(theory_results)
    if theory_results:
        lines.append("Checks")
        w = max(len(r.name) for r in theory_results)
        for r in theory_results:
            status = "PASS" if r.passed else "FAIL"
            note = f"  ({r.note})" if r.note else ""
            lines.append(
                f"{status} {r.name:<{w}}  measured={_g(float(r.measured))} expected={_g(float(r.expected))} tol={_g(float(r.tolerance))}{note}"
            )
        lines.append("")
    return "\n".join(lines), summary_csv(summaries)
