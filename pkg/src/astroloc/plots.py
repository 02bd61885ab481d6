"""Minimal SVG line charts written as plain markup."""

from __future__ import annotations

import math
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=50)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=mag)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * abs(hi):
        out.append(round(v, 10))
        v += step
    return out


def line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str,
               xlabel: str, ylabel: str, log_x: bool = False) -> str:
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    fx = (lambda v: math.log10(v)) if log_x else (lambda v: v)
    x0, x1 = fx(min(xs)), fx(max(xs))
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(v):
        return MARGIN["left"] + (fx(v) - x0) / (x1 - x0) * pw

    def py(v):
        return MARGIN["top"] + (1 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{MARGIN["left"] - 4}" x2="{MARGIN["left"]}" y1="{py(t):.1f}" y2="{py(t):.1f}" stroke="black"/>')
        out.append(f'<text x="{MARGIN["left"] - 7}" y="{py(t) + 4:.1f}" text-anchor="end">{t:g}</text>')
    xt = [10**e for e in range(math.floor(x0), math.ceil(x1) + 1) if x0 <= e <= x1] if log_x else _ticks(x0, x1)
    for t in xt:
        out.append(f'<line x1="{px(t):.1f}" x2="{px(t):.1f}" y1="{HEIGHT - MARGIN["bottom"]}" y2="{HEIGHT - MARGIN["bottom"] + 4}" stroke="black"/>')
        out.append(f'<text x="{px(t):.1f}" y="{HEIGHT - MARGIN["bottom"] + 17}" text-anchor="middle">{t:g}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, (xv, yv)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xv, yv))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if len(xv) <= 20:
            out.extend(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>' for x, y in zip(xv, yv))
        ly = MARGIN["top"] + 14 + 18 * i
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" x2="{lx + 18}" y1="{ly - 4}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def recall_chart(recall_at: Mapping[int, float], title: str = "Recall@N") -> str:
    ns = sorted(recall_at)
    return line_chart({"recall": (ns, [recall_at[n] for n in ns])}, title, "N", "recall (%)", log_x=min(ns) > 0)


def loss_chart(history: Sequence[Sequence[float]], window: int = 50) -> str:
    """Loss curves smoothed with a trailing moving average."""
    it = [h[0] for h in history]
    series = {}
    for col, name in ((1, "pair"), (2, "MUM"), (3, "total")):
        vals = [h[col] for h in history]
        if not any(vals):
            continue
        smooth, acc = [], 0.0
        for i, v in enumerate(vals):
            acc += v
            if i >= window:
                acc -= vals[i - window]
            smooth.append(acc / min(i + 1, window))
        series[name] = (it, smooth)
    return line_chart(series, "Training loss", "iteration", "loss")
