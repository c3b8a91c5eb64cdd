"""Self-contained SVG charts drawn from experiment CSV files.

``curve`` plots one polyline per series against an x column (projection
curve: x = n, series = mean IoU over seeds).  ``bars`` draws grouped bars
(sweep: group = fraction, bar = method, height = mean mIoU over seeds).
Everything drawn is computed from the CSV rows alone.
"""

from collections import defaultdict
from xml.sax.saxutils import escape

import numpy as np

from .fileio import read_csv

WIDTH, HEIGHT = 480, 320
MARGIN = dict(left=56, right=120, top=20, bottom=44)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")

CURVE_COLUMNS = {"n", "mean_iou"}
BARS_COLUMNS = {"method", "fraction", "miou"}


class SchemaError(ValueError):
    """The CSV does not carry the columns a plot kind needs."""


def _check(rows, needed, kind):
    if not rows:
        raise SchemaError(f"{kind} plot needs at least one data row")
    missing = needed - set(rows[0])
    if missing:
        raise SchemaError(f"{kind} plot needs columns {sorted(missing)}")


def _fmt(v):
    return "%.4g" % v


def _frame(title, x_label, y_label, y_lo, y_hi):
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f"<title>{escape(title)}</title>",
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
           f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>']
    for t in np.linspace(y_lo, y_hi, 5):
        y = _ymap(t, y_lo, y_hi)
        out.append(f'<line x1="{x0 - 4}" y1="{y:.2f}" x2="{x0}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 6}" y="{y + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 8}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="14" y="{(y0 + y1) / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {(y0 + y1) / 2})">{escape(y_label)}</text>')
    return out


def _ymap(v, lo, hi):
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    return y0 - (v - lo) / (hi - lo) * (y0 - y1)


def _legend(names):
    x = WIDTH - MARGIN["right"] + 12
    out = ['<g class="legend">']
    for i, name in enumerate(names):
        y = MARGIN["top"] + 14 + 16 * i
        out.append(f'<rect x="{x}" y="{y - 9}" width="10" height="10" fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{x + 14}" y="{y}">{escape(str(name))}</text>')
    out.append("</g>")
    return out


def _y_range(values):
    lo, hi = min(0.0, min(values)), max(1.0, max(values))
    return lo, hi


def curve_svg(rows, x="n", y="mean_iou", series=None, title="projection curve"):
    """One polyline per series with one vertex per distinct x (mean over the other rows)."""
    _check(rows, {x, y} | ({series} if series else set()), "curve")
    groups = defaultdict(lambda: defaultdict(list))
    for r in rows:
        groups[r[series] if series else y][float(r[x])].append(float(r[y]))
    means = {s: sorted((k, float(np.mean(v))) for k, v in pts.items()) for s, pts in groups.items()}
    xs = [p[0] for pts in means.values() for p in pts]
    ys = [p[1] for pts in means.values() for p in pts]
    x_lo, x_hi = min(xs), max(xs)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    y_lo, y_hi = _y_range(ys)
    out = _frame(title, x, y, y_lo, y_hi)
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    xmap = lambda v: x0 + (v - x_lo) / (x_hi - x_lo) * (x1 - x0)  # noqa: E731
    for v in sorted(set(xs)):
        out.append(f'<text x="{xmap(v):.2f}" y="{HEIGHT - MARGIN["bottom"] + 14}" '
                   f'text-anchor="middle">{_fmt(v)}</text>')
    names = sorted(means)
    for i, name in enumerate(names):
        pts = " ".join(f"{xmap(a):.2f},{_ymap(b, y_lo, y_hi):.2f}" for a, b in means[name])
        out.append(f'<polyline class="series" data-series="{escape(str(name))}" points="{pts}" '
                   f'fill="none" stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="2"/>')
    out += _legend(names)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bars_svg(rows, group="fraction", series="method", y="miou", title="label-fraction sweep"):
    """Grouped bars: one group per ``group`` value, one bar per ``series`` value."""
    _check(rows, {group, series, y}, "bars")
    cells = defaultdict(list)
    for r in rows:
        cells[(float(r[group]), r[series])].append(float(r[y]))
    groups = sorted({g for g, _ in cells})
    names = sorted({s for _, s in cells})
    means = {k: float(np.mean(v)) for k, v in cells.items()}
    y_lo, y_hi = _y_range(list(means.values()))
    out = _frame(title, group, y, y_lo, y_hi)
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    slot = (x1 - x0) / len(groups)
    bar = slot * 0.8 / len(names)
    base = _ymap(max(y_lo, 0.0), y_lo, y_hi)
    for gi, g in enumerate(groups):
        left = x0 + gi * slot + slot * 0.1
        out.append(f'<text x="{left + slot * 0.4:.2f}" y="{HEIGHT - MARGIN["bottom"] + 14}" '
                   f'text-anchor="middle">{_fmt(g)}</text>')
        for si, s in enumerate(names):
            if (g, s) not in means:
                continue
            top = _ymap(means[(g, s)], y_lo, y_hi)
            out.append(f'<rect class="bar" data-series="{escape(s)}" x="{left + si * bar:.2f}" '
                       f'y="{min(top, base):.2f}" width="{bar:.2f}" height="{abs(base - top):.2f}" '
                       f'fill="{PALETTE[si % len(PALETTE)]}"/>')
    out += _legend(names)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(csv_path, kind, out_path):
    """Render ``csv_path`` as ``kind`` ('curve' or 'bars') into ``out_path``."""
    rows = read_csv(csv_path)
    if kind == "curve":
        svg = curve_svg(rows, series="method" if rows and "method" in rows[0] else None)
    elif kind == "bars":
        svg = bars_svg(rows)
    else:
        raise SchemaError(f"unknown plot kind {kind!r}")
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
    return out_path
