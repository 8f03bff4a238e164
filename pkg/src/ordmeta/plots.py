"""Deterministic SVG rendering of fit summaries.

Summary ROC panels (median curve per test, shaded credible and
prediction regions), accuracy-versus-threshold panels, and forest plots
of pairwise differences.  Everything is assembled from fixed-format
strings, so identical inputs produce identical bytes -- the plots are
diffable and need no plotting backend.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

__all__ = ["credible_region", "prediction_region", "sroc_svg",
           "threshold_svg", "forest_svg"]

PALETTE = ("#2b6cb0", "#c53030", "#2f855a", "#6b46c1", "#b7791f",
           "#319795")

_PANEL = 420
_ML, _MR, _MT, _MB = 52, 14, 18, 44


def _f(x: float) -> str:
    return f"{x:.2f}"


def _hull(points: np.ndarray) -> np.ndarray:
    """Convex hull by Andrew's monotone chain, degenerate-safe: returns
    the unique points themselves when fewer than three are distinct (a
    segment or a single point still renders as a polygon)."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) < 3:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                u = out[-1] - out[-2]
                v = p - out[-2]
                if u[0] * v[1] - u[1] * v[0] > 0:
                    break
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    return hull if len(hull) >= 3 else pts


def _corner_cloud(sp_lo, sp_hi, se_lo, se_hi) -> np.ndarray:
    """All interval corners in ROC coordinates (1 - specificity,
    sensitivity), one box per threshold."""
    pts = []
    for slo, shi, elo, ehi in zip(sp_lo, sp_hi, se_lo, se_hi):
        for sp in (slo, shi):
            for se in (elo, ehi):
                pts.append((1.0 - sp, se))
    return np.asarray(pts)


def _require_thresholds(summary):
    if len(getattr(summary, "thresholds", ())) == 0:
        raise ValueError("no thresholds to plot")


def credible_region(summary) -> np.ndarray:
    """Convex band around the median curve: hull of the per-threshold
    credible-interval corners in ROC coordinates.  Contains every
    median point by construction."""
    _require_thresholds(summary)
    return _hull(_corner_cloud(summary.sp_lo, summary.sp_hi,
                               summary.se_lo, summary.se_hi))


def prediction_region(summary) -> Optional[np.ndarray]:
    """Like :func:`credible_region` but over the new-study prediction
    intervals; None when the summary carries no prediction bounds."""
    _require_thresholds(summary)
    if getattr(summary, "se_pred_lo", None) is None:
        return None
    return _hull(_corner_cloud(summary.sp_pred_lo, summary.sp_pred_hi,
                               summary.se_pred_lo, summary.se_pred_hi))


# ---------------------------------------------------------------------
# low-level svg pieces


def _polygon(points_px, fill, opacity, stroke="none", dash=None) -> str:
    pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in points_px)
    extra = f' stroke="{stroke}" stroke-width="1"' if stroke != "none" \
        else ""
    if dash:
        extra += f' stroke-dasharray="{dash}"'
    return (f'<polygon points="{pts}" fill="{fill}" '
            f'fill-opacity="{opacity}"{extra}/>')


def _polyline(points_px, color, width="1.6", dash=None) -> str:
    pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in points_px)
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"{extra}/>')


def _line(x1, y1, x2, y2, color, width="1", dash=None) -> str:
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" '
            f'y2="{_f(y2)}" stroke="{color}" stroke-width="{width}"'
            f'{extra}/>')


def _circle(x, y, r, color) -> str:
    return (f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{r}" '
            f'fill="{color}"/>')


def _text(x, y, s, size=11, anchor="middle", color="#333") -> str:
    return (f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" '
            f'font-family="sans-serif" text-anchor="{anchor}" '
            f'fill="{color}">{s}</text>')


def _svg(width, height, body: Sequence[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" '
                      'fill="white"/>'] + list(body) + ["</svg>"])


class _Axes:
    """Unit-square axes mapped into one panel's pixel box."""

    def __init__(self, x0=0.0, y0=0.0):
        self.x0, self.y0 = x0, y0
        self.pw = _PANEL - _ML - _MR
        self.ph = _PANEL - _MT - _MB

    def x(self, v) -> float:
        return self.x0 + _ML + float(v) * self.pw

    def y(self, v) -> float:
        return self.y0 + _MT + (1.0 - float(v)) * self.ph

    def frame(self, xlabel, ylabel, title="") -> list:
        parts = [f'<rect x="{_f(self.x(0))}" y="{_f(self.y(1))}" '
                 f'width="{_f(self.pw)}" height="{_f(self.ph)}" '
                 'fill="none" stroke="#888" stroke-width="1"/>']
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            parts.append(_text(self.x(t), self.y(0) + 16, f"{t:g}", 10))
            parts.append(_text(self.x(0) - 6, self.y(t) + 3, f"{t:g}", 10,
                               anchor="end"))
            parts.append(_line(self.x(t), self.y(0), self.x(t),
                               self.y(0) + 4, "#888"))
            parts.append(_line(self.x(0) - 4, self.y(t), self.x(0),
                               self.y(t), "#888"))
        parts.append(_text(self.x(0.5), self.y(0) + 34, xlabel, 12))
        parts.append(f'<text x="{_f(self.x0 + 14)}" '
                     f'y="{_f(self.y(0.5))}" font-size="12" '
                     f'font-family="sans-serif" text-anchor="middle" '
                     f'fill="#333" transform="rotate(-90 '
                     f'{_f(self.x0 + 14)} {_f(self.y(0.5))})">'
                     f'{ylabel}</text>')
        if title:
            parts.append(_text(self.x(0.5), self.y(1) - 5, title, 12))
        return parts


def _sroc_panel(ax: _Axes, entries, title="") -> list:
    parts = ax.frame("1 - specificity", "sensitivity", title)
    parts.append(_line(ax.x(0), ax.y(0), ax.x(1), ax.y(1), "#bbb",
                       dash="4,4"))
    for i, (label, summary) in enumerate(entries):
        color = PALETTE[i % len(PALETTE)]
        pred = prediction_region(summary)
        if pred is not None:
            parts.append(_polygon([(ax.x(p[0]), ax.y(p[1])) for p in pred],
                                  color, "0.10", stroke=color, dash="3,3"))
        cred = credible_region(summary)
        parts.append(_polygon([(ax.x(p[0]), ax.y(p[1])) for p in cred],
                              color, "0.25"))
        order = np.argsort(np.asarray(summary.thresholds))
        xs = 1.0 - np.asarray(summary.sp_median)[order]
        ys = np.asarray(summary.se_median)[order]
        parts.append(_polyline(list(zip(map(ax.x, xs), map(ax.y, ys))),
                               color))
        for x, y in zip(xs, ys):
            parts.append(_circle(ax.x(x), ax.y(y), 3, color))
    return parts


def _legend(x, y, items) -> list:
    parts = []
    for i, (label, color) in enumerate(items):
        yy = y + 16 * i
        parts.append(f'<rect x="{_f(x)}" y="{_f(yy)}" width="12" '
                     f'height="12" fill="{color}" fill-opacity="0.6"/>')
        parts.append(_text(x + 17, yy + 10, label, 11, anchor="start"))
    return parts


def sroc_svg(summaries, mode: str = "single") -> str:
    """Summary ROC plot.

    ``summaries`` is a sequence of (label, accuracy-summary) pairs;
    each summary supplies per-threshold medians and credible bounds
    (and optionally prediction bounds).  ``mode`` "single" overlays all
    tests in one panel; "grid" gives one panel per test.
    """
    entries = list(summaries)
    if not entries:
        raise ValueError("no thresholds to plot")
    for _, s in entries:
        _require_thresholds(s)
    if mode not in ("single", "grid"):
        raise ValueError(f"unknown mode {mode!r}")

    if mode == "single":
        ax = _Axes()
        body = _sroc_panel(ax, entries)
        body += _legend(ax.x(1) - 130, ax.y(0) - 18 - 16 * len(entries),
                        [(lab, PALETTE[i % len(PALETTE)])
                         for i, (lab, _) in enumerate(entries)])
        return _svg(_PANEL, _PANEL, body)

    cols = min(3, len(entries))
    rows = (len(entries) + cols - 1) // cols
    body = []
    for i, (label, summary) in enumerate(entries):
        ax = _Axes(x0=(i % cols) * _PANEL, y0=(i // cols) * _PANEL)
        color = PALETTE[i % len(PALETTE)]
        panel = _sroc_panel(_Axes(ax.x0, ax.y0),
                            [(label, summary)], title=label)
        # recolor: single-entry panels always take palette slot 0
        body += [p.replace(PALETTE[0], color) for p in panel]
    return _svg(cols * _PANEL, rows * _PANEL, body)


def threshold_svg(summary, label: str = "") -> str:
    """Sensitivity and specificity against threshold with credible
    whiskers, one series each."""
    _require_thresholds(summary)
    ths = list(summary.thresholds)
    ax = _Axes()
    parts = ax.frame("threshold", "accuracy", label)
    pos = {k: (i + 0.5) / len(ths) for i, k in enumerate(ths)}
    series = (("sensitivity", summary.se_median, summary.se_lo,
               summary.se_hi, PALETTE[0], -6.0),
              ("specificity", summary.sp_median, summary.sp_lo,
               summary.sp_hi, PALETTE[1], 6.0))
    for name, med, lo, hi, color, dx in series:
        line_pts = []
        for k, m, l, h in zip(ths, med, lo, hi):
            x = ax.x(pos[k]) + dx
            line_pts.append((x, ax.y(m)))
            parts.append(_line(x, ax.y(l), x, ax.y(h), color, "1.4"))
            parts.append(_circle(x, ax.y(m), 3, color))
        parts.append(_polyline(line_pts, color, width="1"))
    for k in ths:
        parts.append(_text(ax.x(pos[k]), ax.y(0) + 16, str(k), 10))
    parts += _legend(ax.x(0) + 8, ax.y(1) + 8,
                     [(n, c) for n, _, _, _, c, _ in series])
    return _svg(_PANEL, _PANEL, parts)


def forest_svg(records) -> str:
    """Forest plot of pairwise accuracy differences.

    ``records`` follow the network comparison layout: dicts with
    ``test_a``/``test_b``, the two threshold labels and
    ``delta_se``/``delta_sp`` interval dicts.  One row per record, one
    column per quantity, a zero reference line in each column.
    """
    records = list(records)
    if not records:
        raise ValueError("no comparisons to plot")
    row_h, label_w, col_w, top = 24, 190, 240, 40
    width = label_w + 2 * col_w + 20
    height = top + row_h * len(records) + 34

    span = 0.0
    for r in records:
        for q in ("delta_se", "delta_sp"):
            span = max(span, abs(r[q]["lo"]), abs(r[q]["hi"]))
    span = max(span, 1e-6) * 1.05

    def xmap(col, v):
        x0 = label_w + col * col_w + 14
        return x0 + (float(v) + span) / (2 * span) * (col_w - 28)

    parts = []
    for col, title in ((0, "&#916;sensitivity"), (1, "&#916;specificity")):
        parts.append(_text(xmap(col, 0.0), top - 18, title, 12))
        parts.append(_line(xmap(col, 0.0), top - 8,
                           xmap(col, 0.0), top + row_h * len(records),
                           "#999", dash="3,3"))
        for v in (-span / 1.05, 0.0, span / 1.05):
            parts.append(_text(xmap(col, v), height - 16, f"{v:+.2f}", 9))
    for i, r in enumerate(records):
        y = top + row_h * i + row_h / 2
        name = (f"{r['test_a']} vs {r['test_b']} "
                f"@{r['threshold_a']}/{r['threshold_b']}")
        parts.append(_text(8, y + 4, name, 11, anchor="start"))
        for col, q in ((0, "delta_se"), (1, "delta_sp")):
            d = r[q]
            color = PALETTE[col]
            parts.append(_line(xmap(col, d["lo"]), y, xmap(col, d["hi"]),
                               y, color, "1.6"))
            x = xmap(col, d["median"])
            parts.append(f'<rect x="{_f(x - 3)}" y="{_f(y - 3)}" '
                         f'width="6" height="6" fill="{color}"/>')
    return _svg(width, height, parts)
