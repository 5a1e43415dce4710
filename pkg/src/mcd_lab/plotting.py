"""Static SVG emission for metrics logs and comparison tables.

Hand-rolled SVG with fixed-precision coordinates: identical input always
produces identical bytes, which matplotlib's timestamped metadata cannot
promise.  Loss curves become one polyline per non-empty series; the
comparison table becomes grouped bars of recall@1 and rank correlation.
"""

from __future__ import annotations

import csv

from .errors import BadHeaderError
from .evalsuite import COMPARISON_HEADER
from .trainer import METRICS_HEADER

WIDTH, HEIGHT = 640, 400
MARGIN = 50

_SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _svg_open(title: str) -> list:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
    ]


def _axes(parts: list) -> None:
    x0, y0 = MARGIN, HEIGHT - MARGIN
    x1, y1 = WIDTH - MARGIN, MARGIN
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')


def loss_curve_svg(rows: list, columns: list, path: str) -> None:
    """Polyline per listed column; rows are dicts of floats with a 'step' key."""
    parts = _svg_open("training losses")
    _axes(parts)
    if rows:
        steps = [r["step"] for r in rows]
        lo_x, hi_x = min(steps), max(steps)
        span_x = (hi_x - lo_x) or 1.0
        values = [r[c] for r in rows for c in columns]
        lo_y, hi_y = min(values), max(values)
        span_y = (hi_y - lo_y) or 1.0

        def sx(x):
            return MARGIN + (x - lo_x) / span_x * (WIDTH - 2 * MARGIN)

        def sy(y):
            return HEIGHT - MARGIN - (y - lo_y) / span_y * (HEIGHT - 2 * MARGIN)

        for k, col in enumerate(columns):
            color = _SERIES_COLORS[k % len(_SERIES_COLORS)]
            pts = " ".join(f"{_fmt(sx(r['step']))},{_fmt(sy(r[col]))}" for r in rows)
            parts.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
            parts.append(
                f'<text x="{WIDTH - MARGIN + 4}" y="{MARGIN + 14 * k + 10}" '
                f'font-size="10" font-family="sans-serif" fill="{color}">{col}</text>')
        parts.append(
            f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 16}" font-size="10" '
            f'font-family="sans-serif">step {lo_x}..{hi_x}</text>')
        parts.append(
            f'<text x="4" y="{MARGIN}" font-size="10" '
            f'font-family="sans-serif">{_fmt(hi_y)}</text>')
        parts.append(
            f'<text x="4" y="{HEIGHT - MARGIN}" font-size="10" '
            f'font-family="sans-serif">{_fmt(lo_y)}</text>')
    parts.append("</svg>")
    _write(parts, path)


def comparison_chart(rows, path: str) -> None:
    """Grouped bars: mean recall@1 (image-to-text) and mean rho per objective."""
    objectives = []
    for r in rows:
        if r.objective not in objectives:
            objectives.append(r.objective)
    means = {}
    for o in objectives:
        got = [r for r in rows if r.objective == o]
        means[o] = (
            sum(r.recall1_i2t for r in got) / len(got),
            sum(r.rho for r in got) / len(got),
        )
    parts = _svg_open("recall@1 (blue) and misalignment rho (red) by objective")
    _axes(parts)
    if objectives:
        hi = max(max(abs(v) for v in pair) for pair in means.values()) or 1.0
        slot = (WIDTH - 2 * MARGIN) / len(objectives)
        bar_w = slot / 3.0
        base_y = HEIGHT - MARGIN
        scale = (HEIGHT - 2 * MARGIN) / hi
        for k, o in enumerate(objectives):
            x = MARGIN + k * slot + slot / 6.0
            for j, (val, color) in enumerate(zip(means[o], ("#1f77b4", "#d62728"))):
                h = abs(val) * scale
                y = base_y - h if val >= 0 else base_y
                parts.append(
                    f'<rect x="{_fmt(x + j * bar_w)}" y="{_fmt(y)}" '
                    f'width="{_fmt(bar_w - 2)}" height="{_fmt(h)}" fill="{color}"/>')
            parts.append(
                f'<text x="{_fmt(x + bar_w)}" y="{base_y + 16}" text-anchor="middle" '
                f'font-size="10" font-family="sans-serif">{o}</text>')
    parts.append("</svg>")
    _write(parts, path)


def _write(parts: list, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")


LOSS_COLUMNS = ("loss_total", "loss_c", "loss_pos", "loss_neg", "loss_noisy", "loss_mlm")


def plot_csv(in_path: str, out_path: str) -> None:
    """Dispatch on the CSV header: metrics log or comparison table."""
    with open(in_path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise BadHeaderError("empty file") from None
        records = [rec for rec in reader if rec]

    joined = ",".join(header)
    if joined == METRICS_HEADER:
        rows = []
        for rec in records:
            row = {name: float(v) for name, v in zip(header, rec)}
            row["step"] = int(rec[0])
            rows.append(row)
        columns = [c for c in LOSS_COLUMNS
                   if any(abs(r[c]) > 0 for r in rows)] or ["loss_total"]
        loss_curve_svg(rows, columns, out_path)
    elif joined == COMPARISON_HEADER:
        from .evalsuite import ComparisonRow
        rows = [ComparisonRow(rec[0], int(rec[1]), *map(float, rec[2:]))
                for rec in records if rec[1] not in ("mean", "std")]
        comparison_chart(rows, out_path)
    else:
        raise BadHeaderError(f"unknown CSV header: {joined!r}")
