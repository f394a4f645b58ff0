"""Write sweep records, traces and ellipses to CSV and SVG."""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
from collections.abc import Sequence
from io import StringIO
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from varfilt.harness import EllipseSet, RunMetrics, SweepRecord

logger = logging.getLogger(__name__)

SWEEP_HEADERS = [
    "dim", "filter", "problems", "steps", "seed",
    "mse_mean", "mse_lo", "mse_hi",
    "wcse_mean", "wcse_lo", "wcse_hi",
]
TRACE_HEADERS = ["step", "wcse", "mse"]
ELLIPSE_HEADERS = ["method", "index", "x", "y"]

FILTER_COLORS = {
    "kf": "#1f77b4",
    "viep": "#ff7f0e",
    "l2": "#2ca02c",
    "vih": "#d62728",
    "l2h": "#9467bd",
}
ELLIPSE_COLORS = {"true": "#000000", "ep": "#ff7f0e", "elbo": "#1f77b4", "l2": "#2ca02c"}


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def write_atomic(target: Path, content: str) -> None:
    """Write *content* to a temp file beside *target*, then rename over it."""
    target = Path(target)
    target_dir = target.parent
    target_dir.mkdir(parents=True, exist_ok=True)

    fd, tmp_path = tempfile.mkstemp(dir=target_dir, suffix=".tmp", prefix=".varfilt-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(content)
        os.replace(tmp_path, target)
    except BaseException:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise
    logger.info("wrote %s", target)


def _csv_text(headers: list[str], rows: list[list[str]], comment: str | None = None) -> str:
    buf = StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(headers)
    writer.writerows(rows)
    return buf.getvalue()


def sweep_csv(records: Sequence[SweepRecord]) -> str:
    rows = [
        [
            str(r.dim), r.filter.value, str(r.problems), str(r.steps), str(r.seed),
            _fmt(r.mse_mean), _fmt(r.mse_lo), _fmt(r.mse_hi),
            _fmt(r.wcse_mean), _fmt(r.wcse_lo), _fmt(r.wcse_hi),
        ]
        for r in records
    ]
    return _csv_text(SWEEP_HEADERS, rows)


def write_sweep_csv(records: Sequence[SweepRecord], output_path: Path) -> None:
    """One row per (dim, filter) cell in record order."""
    write_atomic(output_path, sweep_csv(records))


def write_trace_csv(metrics: RunMetrics, output_path: Path) -> None:
    """Per-step worst-case scaled error and MSE; step counts from 1."""
    rows = [
        [str(t + 1), _fmt(w), _fmt(m)]
        for t, (w, m) in enumerate(zip(metrics.per_step_wcse, metrics.per_step_mse))
    ]
    write_atomic(output_path, _csv_text(TRACE_HEADERS, rows))


def write_ellipse_csv(ellipses: EllipseSet, output_path: Path) -> None:
    rows = [
        [method, str(i), _fmt(x), _fmt(y)]
        for method, points in ellipses.points.items()
        for i, (x, y) in enumerate(points)
    ]
    comment = f"seed={ellipses.seed} obs={ellipses.obs} level={ellipses.level}"
    write_atomic(output_path, _csv_text(ELLIPSE_HEADERS, rows, comment))


# ── SVG ─────────────────────────────────────────────────────────

_PANEL_W = 420
_PANEL_H = 320
_MARGIN = 50


class _Axis:
    """Linear map from data to pixel coordinates; log10 is applied by the caller."""

    def __init__(self, lo: float, hi: float, start: float, end: float) -> None:
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        self.lo, self.hi, self.start, self.end = lo, hi, start, end

    def __call__(self, value: float) -> float:
        return self.start + (value - self.lo) / (self.hi - self.lo) * (self.end - self.start)


def _svg_document(width: int, height: int, body: list[str]) -> str:
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'  <rect width="{width}" height="{height}" fill="white"/>',
    ]
    lines.extend(f"  {line}" for line in body)
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _log_range(values: list[float]) -> tuple[float, float]:
    logs = [math.log10(v) for v in values if v > 0.0 and math.isfinite(v)]
    if not logs:
        return 0.0, 1.0
    return math.floor(min(logs)), math.ceil(max(logs))


def _sweep_panel(records: Sequence[SweepRecord], metric: str, x0: float, title: str) -> list[str]:
    dims = sorted({r.dim for r in records})
    filters = list(dict.fromkeys(r.filter.value for r in records))
    values = [getattr(r, f"{metric}_{k}") for r in records for k in ("lo", "mean", "hi")]
    ylo, yhi = _log_range(values)
    xlo, xhi = math.log2(dims[0]) - 0.5, math.log2(dims[-1]) + 0.5
    ax = _Axis(xlo, xhi, x0 + _MARGIN, x0 + _PANEL_W - 10)
    ay = _Axis(ylo, yhi, _PANEL_H - _MARGIN, 30)

    body = [
        f'<text x="{x0 + _PANEL_W / 2:.1f}" y="18" text-anchor="middle">{title}</text>',
        f'<rect x="{ax.start:.1f}" y="{ay.end:.1f}" width="{ax.end - ax.start:.1f}" '
        f'height="{ay.start - ay.end:.1f}" fill="none" stroke="#888"/>',
    ]
    for dim in dims:
        px = ax(math.log2(dim))
        body.append(f'<text x="{px:.1f}" y="{ay.start + 15:.1f}" text-anchor="middle">{dim}</text>')
    for decade in range(int(ylo), int(yhi) + 1):
        py = ay(decade)
        body.append(f'<text x="{ax.start - 5:.1f}" y="{py + 4:.1f}" text-anchor="end">1e{decade}</text>')

    # small horizontal offset per filter so error bars do not overlap
    spread = 0.25
    for j, name in enumerate(filters):
        offset = (j - (len(filters) - 1) / 2) * spread / max(len(filters), 1)
        color = FILTER_COLORS.get(name, "#333333")
        rows = sorted((r for r in records if r.filter.value == name), key=lambda r: r.dim)
        points = []
        for r in rows:
            px = ax(math.log2(r.dim) + offset)
            mean, lo, hi = (getattr(r, f"{metric}_{k}") for k in ("mean", "lo", "hi"))
            if min(mean, lo, hi) <= 0.0:
                continue
            py = ay(math.log10(mean))
            points.append(f"{px:.1f},{py:.1f}")
            body.append(
                f'<line x1="{px:.1f}" y1="{ay(math.log10(lo)):.1f}" x2="{px:.1f}" '
                f'y2="{ay(math.log10(hi)):.1f}" stroke="{color}"/>'
            )
        if points:
            body.append(f'<polyline points="{" ".join(points)}" fill="none" stroke="{color}"/>')
        body.append(
            f'<text x="{ax.end - 5:.1f}" y="{ay.end + 14 * (j + 1):.1f}" text-anchor="end" '
            f'fill="{color}">{name}</text>'
        )
    return body


def sweep_svg(records: Sequence[SweepRecord]) -> str:
    if not records:
        return _svg_document(2 * _PANEL_W, _PANEL_H, [])
    body = _sweep_panel(records, "mse", 0, "MSE")
    body += _sweep_panel(records, "wcse", _PANEL_W, "worst-case scaled error")
    return _svg_document(2 * _PANEL_W, _PANEL_H, body)


def write_sweep_svg(records: Sequence[SweepRecord], output_path: Path) -> None:
    """Two log-log panels (MSE, WCSE) with 93% intervals as error bars."""
    write_atomic(output_path, sweep_svg(records))


def ellipse_svg(ellipses: EllipseSet) -> str:
    size = _PANEL_H
    all_points = np.vstack(list(ellipses.points.values()))
    lo = all_points.min(axis=0)
    hi = all_points.max(axis=0)
    half = 0.55 * float(np.max(hi - lo))
    center = 0.5 * (lo + hi)
    ax = _Axis(center[0] - half, center[0] + half, 10, size - 10)
    ay = _Axis(center[1] - half, center[1] + half, size - 10, 10)

    body = []
    for j, (method, points) in enumerate(ellipses.points.items()):
        color = ELLIPSE_COLORS.get(method, "#333333")
        coords = " ".join(f"{ax(x):.2f},{ay(y):.2f}" for x, y in points)
        body.append(f'<polygon points="{coords}" fill="none" stroke="{color}"/>')
        body.append(f'<text x="{size - 12}" y="{20 + 14 * j}" text-anchor="end" fill="{color}">{method}</text>')
    mx, my = ellipses.mean
    body.append(f'<circle cx="{ax(mx):.2f}" cy="{ay(my):.2f}" r="2" fill="black"/>')
    return _svg_document(size, size, body)


def write_ellipse_svg(ellipses: EllipseSet, output_path: Path) -> None:
    write_atomic(output_path, ellipse_svg(ellipses))
