"""Hand-rolled SVG polyline charts (no plotting dependency).

Fixed 800x500 canvas, 10-tick axes, fixed series palette, legend on the
right. Output bytes are deterministic for fixed input: all numbers are
formatted with explicit format strings and series are drawn in sorted name
order.
"""

from __future__ import annotations

WIDTH = 800
HEIGHT = 500
MARGIN_LEFT = 70
MARGIN_RIGHT = 150
MARGIN_TOP = 40
MARGIN_BOTTOM = 60
N_TICKS = 10

PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
]


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _coord(v: float) -> str:
    return f"{v:.3f}"


def render_lines(
    series: dict[str, list[tuple[float, float]]],
    *,
    title: str = "",
    x_label: str = "x",
    y_label: str = "y",
) -> str:
    """Render named (x, y) point lists as one polyline per series."""
    names = sorted(series)
    points = [p for name in names for p in series[name]]
    if not points:
        raise ValueError("nothing to plot")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_min, x_max = min(xs), max(xs)
    y_min, y_max = min(ys), max(ys)
    if x_max == x_min:
        x_min, x_max = x_min - 0.5, x_max + 0.5
    if y_max == y_min:
        y_min, y_max = y_min - 0.5, y_max + 0.5

    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def sx(x: float) -> float:
        return MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w

    def sy(y: float) -> float:
        return MARGIN_TOP + plot_h - (y - y_min) / (y_max - y_min) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(
            f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" '
            f'font-family="sans-serif" font-size="16">{title}</text>'
        )
    # axes
    x0, y0 = MARGIN_LEFT, MARGIN_TOP + plot_h
    out.append(
        f'<line x1="{x0}" y1="{y0}" x2="{x0 + plot_w}" y2="{y0}" stroke="black"/>'
    )
    out.append(f'<line x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{y0}" stroke="black"/>')
    for i in range(N_TICKS + 1):
        fx = x_min + (x_max - x_min) * i / N_TICKS
        px = sx(fx)
        out.append(f'<line x1="{_coord(px)}" y1="{y0}" x2="{_coord(px)}" y2="{y0 + 5}" stroke="black"/>')
        out.append(
            f'<text x="{_coord(px)}" y="{y0 + 20}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{_fmt(fx)}</text>'
        )
        fy = y_min + (y_max - y_min) * i / N_TICKS
        py = sy(fy)
        out.append(f'<line x1="{x0 - 5}" y1="{_coord(py)}" x2="{x0}" y2="{_coord(py)}" stroke="black"/>')
        out.append(
            f'<text x="{x0 - 8}" y="{_coord(py + 3)}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{_fmt(fy)}</text>'
        )
    out.append(
        f'<text x="{MARGIN_LEFT + plot_w // 2}" y="{HEIGHT - 15}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{x_label}</text>'
    )
    out.append(
        f'<text x="18" y="{MARGIN_TOP + plot_h // 2}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 18 {MARGIN_TOP + plot_h // 2})">{y_label}</text>'
    )
    # series
    for si, name in enumerate(names):
        color = PALETTE[si % len(PALETTE)]
        pts = " ".join(f"{_coord(sx(x))},{_coord(sy(y))}" for x, y in series[name])
        out.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'
        )
        ly = MARGIN_TOP + 14 + 18 * si
        lx = MARGIN_LEFT + plot_w + 12
        out.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        out.append(
            f'<text x="{lx + 28}" y="{ly}" font-family="sans-serif" font-size="11">{name}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
