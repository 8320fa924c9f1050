"""Static SVG charts: boxplots, line charts with markers, grouped bars.

Pure-string SVG 1.1 generation (no plotting dependency).  Every data
value printed into a chart goes through ``fmt_value`` so text labels
match the CSV/JSON sources at the printed precision.
"""

from dataclasses import dataclass
from xml.sax.saxutils import escape as _escape


def escape(text: str) -> str:
    return _escape(str(text), {'"': "&quot;"})

__all__ = ["fmt_value", "boxplot_svg", "line_chart_svg", "bar_chart_svg"]

_COLORS = ("#3465a4", "#e08020", "#3a9a48", "#a04070", "#8a6d3b", "#508a9a")
LABEL_PRECISION = 3


def fmt_value(v: float, digits: int = LABEL_PRECISION) -> str:
    return f"{v:.{digits}f}"


@dataclass
class _Frame:
    width: int
    height: int
    left: int = 64
    right: int = 20
    top: int = 36
    bottom: int = 52

    @property
    def plot_w(self) -> float:
        return self.width - self.left - self.right

    @property
    def plot_h(self) -> float:
        return self.height - self.top - self.bottom


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = span / max(1, n - 1)
    return [lo + i * step for i in range(n)]


def _svg_header(width: int, height: int, title: str) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{escape(title)}</text>',
    ]


def _axes(frame: _Frame, lo: float, hi: float, ylabel: str) -> tuple[list[str], callable]:
    def y_of(v: float) -> float:
        return frame.top + frame.plot_h * (1.0 - (v - lo) / (hi - lo))

    parts = [
        f'<line x1="{frame.left}" y1="{frame.top}" x2="{frame.left}" '
        f'y2="{frame.top + frame.plot_h}" stroke="black"/>',
        f'<line x1="{frame.left}" y1="{frame.top + frame.plot_h}" '
        f'x2="{frame.left + frame.plot_w}" y2="{frame.top + frame.plot_h}" stroke="black"/>',
        f'<text x="16" y="{frame.top + frame.plot_h / 2}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11" '
        f'transform="rotate(-90 16 {frame.top + frame.plot_h / 2})">{escape(ylabel)}</text>',
    ]
    for tick in _nice_ticks(lo, hi):
        y = y_of(tick)
        parts.append(
            f'<line x1="{frame.left - 4}" y1="{y:.2f}" x2="{frame.left}" y2="{y:.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{frame.left - 8}" y="{y + 3:.2f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{fmt_value(tick, 2)}</text>'
        )
    return parts, y_of


def _value_range(values, pad_frac=0.08):
    lo, hi = min(values), max(values)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = (hi - lo) * pad_frac
    return lo - pad, hi + pad


def boxplot_svg(
    groups: dict[str, list[float]],
    title: str = "",
    ylabel: str = "dice",
    width: int = 720,
    height: int = 420,
) -> str:
    """One box (quartiles + median + whiskers) per group, with every
    individual data point drawn beside it."""
    frame = _Frame(width, height)
    all_values = [v for vs in groups.values() for v in vs]
    lo, hi = _value_range(all_values)
    parts = _svg_header(width, height, title)
    axis_parts, y_of = _axes(frame, lo, hi, ylabel)
    parts += axis_parts

    n = len(groups)
    slot = frame.plot_w / max(1, n)
    box_w = min(46.0, slot * 0.4)
    for i, (name, values) in enumerate(groups.items()):
        cx = frame.left + slot * (i + 0.5)
        vs = sorted(values)
        m = len(vs)
        med = vs[m // 2] if m % 2 else 0.5 * (vs[m // 2 - 1] + vs[m // 2])
        q1 = vs[max(0, (m - 1) // 4)]
        q3 = vs[min(m - 1, (3 * (m - 1)) // 4)]
        color = _COLORS[i % len(_COLORS)]
        parts.append(
            f'<g class="box" data-group="{escape(name)}">'
            f'<line x1="{cx:.1f}" y1="{y_of(vs[0]):.2f}" x2="{cx:.1f}" y2="{y_of(vs[-1]):.2f}" '
            f'stroke="{color}"/>'
            f'<rect x="{cx - box_w / 2:.1f}" y="{y_of(q3):.2f}" width="{box_w:.1f}" '
            f'height="{max(1.0, y_of(q1) - y_of(q3)):.2f}" fill="{color}" fill-opacity="0.25" '
            f'stroke="{color}"/>'
            f'<line x1="{cx - box_w / 2:.1f}" y1="{y_of(med):.2f}" x2="{cx + box_w / 2:.1f}" '
            f'y2="{y_of(med):.2f}" stroke="{color}" stroke-width="2"/>'
        )
        for j, v in enumerate(values):
            dx = box_w * 0.75 * ((j + 0.5) / max(1, len(values)) - 0.5)
            parts.append(
                f'<circle class="datapoint" cx="{cx + dx:.1f}" cy="{y_of(v):.2f}" r="2.5" '
                f'fill="{color}"/>'
            )
        parts.append(
            f'<text x="{cx:.1f}" y="{y_of(med) - 6:.2f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="9">{fmt_value(med)}</text>'
        )
        parts.append("</g>")
        parts.append(
            f'<text x="{cx:.1f}" y="{frame.top + frame.plot_h + 16:.1f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{escape(name)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def line_chart_svg(
    series: dict[str, list[tuple[float, float]]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "dice",
    width: int = 720,
    height: int = 420,
) -> str:
    """Multi-series line chart with circle markers at every point."""
    frame = _Frame(width, height)
    ys = [y for pts in series.values() for _, y in pts]
    xs = [x for pts in series.values() for x, _ in pts]
    lo, hi = _value_range(ys)
    xlo, xhi = min(xs), max(xs)
    if xhi == xlo:
        xhi = xlo + 1.0
    parts = _svg_header(width, height, title)
    axis_parts, y_of = _axes(frame, lo, hi, ylabel)
    parts += axis_parts

    def x_of(v: float) -> float:
        return frame.left + frame.plot_w * (v - xlo) / (xhi - xlo)

    for x in sorted(set(xs)):
        parts.append(
            f'<text x="{x_of(x):.1f}" y="{frame.top + frame.plot_h + 16:.1f}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="10">{x:g}</text>'
        )
    parts.append(
        f'<text x="{frame.left + frame.plot_w / 2:.1f}" y="{height - 10}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11">{escape(xlabel)}</text>'
    )
    for i, (name, pts) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{x_of(x):.1f},{y_of(y):.2f}" for x, y in pts)
        parts.append(f'<g class="series" data-series="{escape(name)}">')
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in pts:
            parts.append(
                f'<circle class="marker" cx="{x_of(x):.1f}" cy="{y_of(y):.2f}" r="3" fill="{color}"/>'
            )
        parts.append("</g>")
        parts.append(
            f'<text x="{frame.left + frame.plot_w - 4:.1f}" y="{frame.top + 14 + 13 * i}" '
            f'text-anchor="end" font-family="sans-serif" font-size="10" '
            f'fill="{color}">{escape(name)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def bar_chart_svg(
    groups: dict[str, dict[str, float]],
    title: str = "",
    ylabel: str = "dice delta",
    width: int = 720,
    height: int = 420,
) -> str:
    """Grouped bars (group -> series name -> value), values printed above bars."""
    frame = _Frame(width, height)
    values = [v for g in groups.values() for v in g.values()]
    lo, hi = _value_range(values + [0.0])
    parts = _svg_header(width, height, title)
    axis_parts, y_of = _axes(frame, lo, hi, ylabel)
    parts += axis_parts
    parts.append(
        f'<line x1="{frame.left}" y1="{y_of(0.0):.2f}" x2="{frame.left + frame.plot_w:.1f}" '
        f'y2="{y_of(0.0):.2f}" stroke="#888" stroke-dasharray="3,3"/>'
    )

    series_names = sorted({name for g in groups.values() for name in g})
    n_groups = len(groups)
    slot = frame.plot_w / max(1, n_groups)
    bar_w = min(30.0, slot * 0.8 / max(1, len(series_names)))
    for gi, (gname, entries) in enumerate(groups.items()):
        cx = frame.left + slot * (gi + 0.5)
        total_w = bar_w * len(series_names)
        for si, sname in enumerate(series_names):
            if sname not in entries:
                continue
            v = entries[sname]
            x = cx - total_w / 2 + si * bar_w
            y0, y1 = y_of(max(0.0, v)), y_of(min(0.0, v))
            color = _COLORS[si % len(_COLORS)]
            parts.append(
                f'<rect class="bar" data-group="{escape(gname)}" data-series="{escape(sname)}" '
                f'x="{x:.1f}" y="{y0:.2f}" width="{bar_w - 2:.1f}" '
                f'height="{max(0.5, y1 - y0):.2f}" fill="{color}" fill-opacity="0.8"/>'
            )
            parts.append(
                f'<text class="bar-label" x="{x + (bar_w - 2) / 2:.1f}" y="{y0 - 3:.2f}" '
                f'text-anchor="middle" font-family="sans-serif" font-size="9">{fmt_value(v)}</text>'
            )
        parts.append(
            f'<text x="{cx:.1f}" y="{frame.top + frame.plot_h + 16:.1f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{escape(gname)}</text>'
        )
    for si, sname in enumerate(series_names):
        parts.append(
            f'<text x="{frame.left + frame.plot_w - 4:.1f}" y="{frame.top + 14 + 13 * si}" '
            f'text-anchor="end" font-family="sans-serif" font-size="10" '
            f'fill="{_COLORS[si % len(_COLORS)]}">{escape(sname)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
