"""Minimal SVG plots for the analysis CSVs."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import DataError, DegenerateRegressionError, UsageError
from .stats import ols_regress

WIDTH, HEIGHT = 480, 320
MARGIN = 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def read_columns(path, x_col=None, y_col=None, group_col=None):
    """Return (x_name, y_name, {group: [(x, y), ...]}) from a CSV.

    Without explicit names the first two numeric columns are used.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path} has no data rows")
    header = list(rows[0])

    def numeric(col):
        try:
            [float(r[col]) for r in rows]
        except (TypeError, ValueError):
            return False
        return True

    if x_col is None or y_col is None:
        nums = [c for c in header if numeric(c)]
        if len(nums) < 2:
            raise DataError(f"{path} needs two numeric columns, found {nums}")
        x_col = x_col or nums[0]
        y_col = y_col or next(c for c in nums if c != x_col)
    for col in (x_col, y_col) + ((group_col,) if group_col else ()):
        if col not in header:
            raise UsageError(f"column {col!r} not in {header}")
    for col in (x_col, y_col):
        if not numeric(col):
            raise DataError(f"column {col!r} is not numeric")
    series = defaultdict(list)
    for r in rows:
        series[r[group_col] if group_col else ""].append((float(r[x_col]), float(r[y_col])))
    return x_col, y_col, dict(series)


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-9 * step:
        out.append(round(v, 10))
        v += step
    return out


def _num(v):
    return f"{v:.2f}"


def render(series: dict, x_label="x", y_label="y", kind="line", title="") -> str:
    """SVG text for one or more named series.

    ``line`` draws one polyline per series (points sorted by x, equal x averaged);
    ``scatter`` draws points plus an OLS regression line per series when n >= 3.
    """
    if kind not in ("line", "scatter"):
        raise UsageError(f"unknown plot kind {kind!r}")
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise DataError("nothing to plot")
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pw, ph = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN

    def sx(v):
        return MARGIN + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return HEIGHT - MARGIN - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>')
    # axes
    bx, by = MARGIN, HEIGHT - MARGIN
    out.append(f'<line class="axis" x1="{bx}" y1="{by}" x2="{WIDTH - MARGIN}" y2="{by}" stroke="black"/>')
    out.append(f'<line class="axis" x1="{bx}" y1="{by}" x2="{bx}" y2="{MARGIN}" stroke="black"/>')
    for t in _ticks(x0, x1):
        out.append(f'<text x="{_num(sx(t))}" y="{by + 16}" text-anchor="middle" font-size="10">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{bx - 4}" y="{_num(sy(t) + 3)}" text-anchor="end" font-size="10">{t:g}</text>')
    out.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{escape(x_label)}</text>')
    out.append(
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(y_label)}</text>'
    )

    for i, (name, s) in enumerate(sorted(series.items())):
        color = COLORS[i % len(COLORS)]
        if kind == "line":
            agg = defaultdict(list)
            for x, y in s:
                agg[x].append(y)
            line = " ".join(f"{_num(sx(x))},{_num(sy(sum(v) / len(v)))}" for x, v in sorted(agg.items()))
            out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        else:
            for x, y in s:
                out.append(f'<circle cx="{_num(sx(x))}" cy="{_num(sy(y))}" r="2.5" fill="{color}"/>')
            try:
                reg = ols_regress([p[0] for p in s], [p[1] for p in s])
            except DegenerateRegressionError:
                reg = None
            if reg is not None:
                ya, yb = reg.intercept + reg.slope * x0, reg.intercept + reg.slope * x1
                out.append(
                    f'<line class="regression" x1="{_num(sx(x0))}" y1="{_num(sy(ya))}" '
                    f'x2="{_num(sx(x1))}" y2="{_num(sy(yb))}" stroke="{color}" stroke-dasharray="4 2"/>'
                )
        if name:
            out.append(
                f'<text x="{WIDTH - MARGIN}" y="{MARGIN + 14 * i}" text-anchor="end" font-size="11" '
                f'fill="{color}">{escape(name)}</text>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(csv_path, out_path, x_col=None, y_col=None, group_col=None, kind="line", title="") -> Path:
    x_name, y_name, series = read_columns(csv_path, x_col, y_col, group_col)
    text = render(series, x_name, y_name, kind, title)
    out_path = Path(out_path)
    tmp = out_path.with_name(out_path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(out_path)
    return out_path
