"""Static SVG line plots.

Each figure is a standalone SVG document built with ``xml.etree`` so the
output is always well-formed.  Data are embedded as polylines.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from typing import Sequence

import numpy as np

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
_DASHES = (None, "6,3", "2,2", "8,3,2,3")

WIDTH, HEIGHT = 640, 400
_MARGIN = dict(left=70, right=20, top=40, bottom=55)


def _nice_ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = np.ceil(lo / step - 1e-9) * step
    ticks = np.arange(start, hi + 0.5 * step * 1e-6, step)
    return [float(t) if abs(t) > 1e-12 * step else 0.0 for t in ticks]


def _fmt_tick(v):
    return format(v, ".6g")


def line_plot(series: Sequence, title: str = "", xlabel: str = "", ylabel: str = "") -> bytes:
    """Render ``series = [(label, x, y), ...]`` as SVG bytes."""
    series = [(str(lab), np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)) for lab, x, y in series]
    finite = [(x[np.isfinite(x) & np.isfinite(y)], y[np.isfinite(x) & np.isfinite(y)]) for _, x, y in series]
    xs = np.concatenate([f[0] for f in finite]) if finite else np.zeros(0)
    ys = np.concatenate([f[1] for f in finite]) if finite else np.zeros(0)
    x_lo, x_hi = (float(xs.min()), float(xs.max())) if xs.size else (0.0, 1.0)
    y_lo, y_hi = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if x_hi <= x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    pad = 0.05 * (y_hi - y_lo) if y_hi > y_lo else 0.5
    y_lo, y_hi = y_lo - pad, y_hi + pad

    left, top = _MARGIN["left"], _MARGIN["top"]
    pw = WIDTH - left - _MARGIN["right"]
    ph = HEIGHT - top - _MARGIN["bottom"]

    def px(x):
        return left + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return top + (y_hi - y) / (y_hi - y_lo) * ph

    svg = ET.Element(
        "svg",
        xmlns="http://www.w3.org/2000/svg",
        width=str(WIDTH),
        height=str(HEIGHT),
        viewBox=f"0 0 {WIDTH} {HEIGHT}",
    )
    ET.SubElement(svg, "rect", x="0", y="0", width=str(WIDTH), height=str(HEIGHT), fill="white")
    if title:
        t = ET.SubElement(svg, "text", x=str(WIDTH / 2), y="22", attrib={"text-anchor": "middle", "font-size": "15"})
        t.text = title
    axes = ET.SubElement(svg, "g", stroke="black", attrib={"stroke-width": "1", "font-size": "11", "font-family": "sans-serif"})
    ET.SubElement(axes, "rect", x=str(left), y=str(top), width=str(pw), height=str(ph), fill="none")
    for xt in _nice_ticks(x_lo, x_hi):
        X = f"{px(xt):.2f}"
        ET.SubElement(axes, "line", x1=X, x2=X, y1=str(top + ph), y2=str(top + ph + 5))
        lab = ET.SubElement(axes, "text", x=X, y=str(top + ph + 18), stroke="none", attrib={"text-anchor": "middle"})
        lab.text = _fmt_tick(xt)
    for yt in _nice_ticks(y_lo, y_hi):
        Y = f"{py(yt):.2f}"
        ET.SubElement(axes, "line", x1=str(left - 5), x2=str(left), y1=Y, y2=Y)
        lab = ET.SubElement(axes, "text", x=str(left - 8), y=Y, stroke="none", attrib={"text-anchor": "end", "dominant-baseline": "middle"})
        lab.text = _fmt_tick(yt)
    if xlabel:
        lab = ET.SubElement(svg, "text", x=str(left + pw / 2), y=str(HEIGHT - 12), attrib={"text-anchor": "middle", "font-size": "12"})
        lab.text = xlabel
    if ylabel:
        cy = top + ph / 2
        lab = ET.SubElement(svg, "text", x="16", y=str(cy), transform=f"rotate(-90 16 {cy})", attrib={"text-anchor": "middle", "font-size": "12"})
        lab.text = ylabel

    for k, ((label, _, _), (x, y)) in enumerate(zip(series, finite)):
        color = _PALETTE[k % len(_PALETTE)]
        attrs = {"fill": "none", "stroke": color, "stroke-width": "1.5"}
        dash = _DASHES[(k // len(_PALETTE) + k) % len(_DASHES)]
        if dash:
            attrs["stroke-dasharray"] = dash
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        line = ET.SubElement(svg, "polyline", points=pts, attrib=attrs)
        ET.SubElement(line, "title").text = label
        ly = top + 14 + 16 * k
        ET.SubElement(svg, "line", x1=str(left + pw - 120), x2=str(left + pw - 95), y1=str(ly), y2=str(ly), attrib=attrs)
        ET.SubElement(svg, "text", x=str(left + pw - 90), y=str(ly + 4), attrib={"font-size": "11"}).text = label
    return ET.tostring(svg, encoding="utf-8", xml_declaration=True)


def write_line_plot(path, series, title: str = "", xlabel: str = "", ylabel: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(line_plot(series, title, xlabel, ylabel))
