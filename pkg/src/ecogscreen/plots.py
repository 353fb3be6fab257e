"""Minimal deterministic SVG plots (line charts and labelled scatters)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
W, H = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 55


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


class _Canvas:
    def __init__(self, title, xlabel, ylabel, xlim, ylim, logy=False):
        self.xlim, self.ylim, self.logy = xlim, ylim, logy
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
            f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(xlabel)}</text>',
            f'<text x="16" y="{H / 2}" text-anchor="middle" font-family="sans-serif" font-size="12" '
            f'transform="rotate(-90 16 {H / 2})">{escape(ylabel)}</text>',
            f'<rect x="{LEFT}" y="{TOP}" width="{W - LEFT - RIGHT}" height="{H - TOP - BOTTOM}" '
            f'fill="none" stroke="#444"/>',
        ]
        for t in _ticks(*xlim):
            x = self.px(t)
            self.parts.append(f'<text x="{_fmt(x)}" y="{H - BOTTOM + 16}" text-anchor="middle" '
                              f'font-family="sans-serif" font-size="10">{t:.3g}</text>')
        for t in _ticks(*ylim):
            y = self.py_raw(t)
            label = f"{10 ** t:.3g}" if logy else f"{t:.3g}"
            self.parts.append(f'<text x="{LEFT - 6}" y="{_fmt(y + 3)}" text-anchor="end" '
                              f'font-family="sans-serif" font-size="10">{label}</text>')

    def px(self, x):
        lo, hi = self.xlim
        return LEFT + (x - lo) / ((hi - lo) or 1.0) * (W - LEFT - RIGHT)

    def py_raw(self, y):
        lo, hi = self.ylim
        return H - BOTTOM - (y - lo) / ((hi - lo) or 1.0) * (H - TOP - BOTTOM)

    def py(self, y):
        return self.py_raw(np.log10(y) if self.logy else y)

    def legend(self, names):
        for i, name in enumerate(names):
            c = PALETTE[i % len(PALETTE)]
            y = TOP + 12 + 14 * i
            self.parts.append(f'<rect x="{W - RIGHT - 130}" y="{y - 8}" width="10" height="10" fill="{c}"/>')
            self.parts.append(f'<text x="{W - RIGHT - 115}" y="{y + 1}" font-family="sans-serif" '
                              f'font-size="10">{escape(str(name))}</text>')

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text("\n".join(self.parts + ["</svg>"]) + "\n")
        return path


def _lim(values, pad=0.05):
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return (0.0, 1.0)
    lo, hi = float(v.min()), float(v.max())
    span = (hi - lo) or 1.0
    return (lo - pad * span, hi + pad * span)


def line_plot(path, x, series: dict, title="", xlabel="", ylabel="", logy=False) -> Path:
    """One polyline per entry of ``series`` (name -> y values over ``x``)."""
    x = np.asarray(x, dtype=np.float64)
    ys = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    if logy:
        floor = min((v[v > 0].min() for v in ys.values() if np.any(v > 0)), default=1e-12)
        ys = {k: np.maximum(v, floor) for k, v in ys.items()}
        ylim = _lim(np.concatenate([np.log10(v) for v in ys.values()]))
    else:
        ylim = _lim(np.concatenate(list(ys.values())))
    cv = _Canvas(title, xlabel, ylabel, (float(x.min()), float(x.max())), ylim, logy)
    for i, (name, y) in enumerate(ys.items()):
        pts = " ".join(f"{_fmt(cv.px(a))},{_fmt(cv.py(b))}" for a, b in zip(x, y))
        cv.parts.append(f'<polyline fill="none" stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="1.2" '
                        f'points="{pts}"/>')
    cv.legend(list(ys))
    return cv.save(path)


def scatter_plot(path, points, labels=None, names=None, title="", xlabel="", ylabel="",
                 annotations=None, hollow=None) -> Path:
    """2-D scatter coloured by integer label; ``hollow`` marks points drawn as rings."""
    pts = np.asarray(points, dtype=np.float64)
    labels = np.zeros(len(pts), dtype=int) if labels is None else np.asarray(labels, dtype=int)
    hollow = np.zeros(len(pts), dtype=bool) if hollow is None else np.asarray(hollow, dtype=bool)
    cv = _Canvas(title, xlabel, ylabel, _lim(pts[:, 0]), _lim(pts[:, 1]))
    for i, ((a, b), lab) in enumerate(zip(pts, labels)):
        c = PALETTE[lab % len(PALETTE)]
        fill = f'fill="none" stroke="{c}"' if hollow[i] else f'fill="{c}"'
        cv.parts.append(f'<circle cx="{_fmt(cv.px(a))}" cy="{_fmt(cv.py(b))}" r="3" {fill}/>')
        if annotations is not None:
            cv.parts.append(f'<text x="{_fmt(cv.px(a) + 5)}" y="{_fmt(cv.py(b) - 5)}" font-family="sans-serif" '
                            f'font-size="10">{escape(str(annotations[i]))}</text>')
    if names:
        cv.legend([names[k] for k in sorted(names)])
    return cv.save(path)
