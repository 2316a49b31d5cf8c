"""Plain SVG charts for the report: no plotting dependency needed."""

from __future__ import annotations

from xml.sax.saxutils import escape

W, H, PAD = 480, 300, 40


def _frame(body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">\n'
            f'<rect width="{W}" height="{H}" fill="white"/>\n'
            f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">'
            f'{escape(title)}</text>\n'
            f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD / 2}" y2="{H - PAD}" stroke="black"/>\n'
            f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>\n')
    return head + "".join(body) + "</svg>\n"


def bar_chart(values, title: str, labels=None) -> str:
    values = [float(v) for v in values]
    labels = labels or [str(i) for i in range(len(values))]
    top = max(max(values, default=0.0), 1e-12)
    span_w = (W - 1.5 * PAD) / max(len(values), 1)
    span_h = H - 2 * PAD
    body = []
    for i, (v, lab) in enumerate(zip(values, labels)):
        h = span_h * max(v, 0.0) / top
        x = PAD + i * span_w + 0.1 * span_w
        body.append(f'<rect x="{x:.2f}" y="{H - PAD - h:.2f}" width="{0.8 * span_w:.2f}" height="{h:.2f}" '
                    f'fill="steelblue"/>\n')
        body.append(f'<text x="{x + 0.4 * span_w:.2f}" y="{H - PAD + 14}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="10">{escape(lab)}</text>\n')
    body.append(f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end" font-family="sans-serif" '
                f'font-size="10">{top:.3g}</text>\n')
    return _frame(body, title)


def line_chart(series: dict[str, list[float]], title: str) -> str:
    colors = ["steelblue", "darkorange", "seagreen", "crimson"]
    pts = [v for s in series.values() for v in s]
    lo, hi = (min(pts), max(pts)) if pts else (0.0, 1.0)
    if hi - lo < 1e-12:
        hi = lo + 1.0
    n = max((len(s) for s in series.values()), default=1)
    body = []
    for c, (name, s) in enumerate(sorted(series.items())):
        color = colors[c % len(colors)]
        xy = [(PAD + (W - 1.5 * PAD) * (i / max(n - 1, 1)), H - PAD - (H - 2 * PAD) * (v - lo) / (hi - lo))
              for i, v in enumerate(s)]
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in xy)
        body.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>\n')
        body.append(f'<text x="{W - PAD}" y="{PAD + 14 * c}" text-anchor="end" font-family="sans-serif" '
                    f'font-size="10" fill="{color}">{escape(name)}</text>\n')
    body.append(f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end" font-family="sans-serif" '
                f'font-size="10">{hi:.3g}</text>\n')
    body.append(f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end" font-family="sans-serif" '
                f'font-size="10">{lo:.3g}</text>\n')
    return _frame(body, title)
