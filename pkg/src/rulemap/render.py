"""World-frame SVG drawing of maps, clips and segment frames."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .geometry import SegmentFrame
from .map_model import LaneKind, MapGraph, Trajectory

COLORS = {LaneKind.DIVIDER: "#1a9e3a", LaneKind.BORDERLINE: "#1f4fd1"}
TRAJECTORY_COLOR = "#d62020"
FRAME_COLOR = "#555555"
MARGIN = 40.0  # px
MAX_SIZE = 1200.0  # px on the longer side


def _fmt(v: float) -> str:
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _path(points: np.ndarray) -> str:
    return " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)


def _nice_step(span: float) -> float:
    raw = max(span, 1e-6) / 5.0
    mag = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 5, 10):
        if raw <= m * mag:
            return m * mag
    return 10 * mag


def render_svg(
    graph: MapGraph,
    trajectory: Trajectory | None = None,
    frames: Sequence[SegmentFrame] = (),
    title: str = "",
) -> str:
    """SVG text for a world-frame map.

    Dividers are green, borderlines blue, the trajectory red; each lane
    gets one label per associated rule near its midpoint. ``frames`` are
    drawn as dashed outlines.
    """
    clouds = [l.xy for l in graph.lanes]
    if trajectory is not None and len(trajectory):
        clouds.append(trajectory.xy)
    clouds += [f.corners_world() for f in frames]
    clouds += [np.array([r.sign_position[:2]]) for r in graph.rules if r.sign_position is not None]
    if clouds:
        allpts = np.vstack(clouds)
        lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    else:
        lo, hi = np.array([0.0, 0.0]), np.array([10.0, 10.0])
    span = np.maximum(hi - lo, 1.0)
    scale = (MAX_SIZE - 2 * MARGIN) / float(span.max())
    width = span[0] * scale + 2 * MARGIN
    height = span[1] * scale + 2 * MARGIN

    def px(pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        # SVG y grows downward
        return np.column_stack([(pts[:, 0] - lo[0]) * scale + MARGIN, (hi[1] - pts[:, 1]) * scale + MARGIN])

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" height="{_fmt(height)}" '
        f'viewBox="0 0 {_fmt(width)} {_fmt(height)}">',
        f'<rect width="100%" height="100%" fill="white"/>',
    ]
    if title:
        out.append(f'<title>{escape(title)}</title>')

    # axes with tick labels in world meters
    out.append('<g id="axes" stroke="#999999" stroke-width="1" font-family="monospace" font-size="10" fill="#666666">')
    x0, y0 = MARGIN, height - MARGIN
    out.append(f'<line x1="{_fmt(x0)}" y1="{_fmt(y0)}" x2="{_fmt(width - MARGIN)}" y2="{_fmt(y0)}"/>')
    out.append(f'<line x1="{_fmt(x0)}" y1="{_fmt(y0)}" x2="{_fmt(x0)}" y2="{_fmt(MARGIN)}"/>')
    for axis in (0, 1):
        step = _nice_step(float(span[axis]))
        v = math.ceil(lo[axis] / step) * step
        while v <= lo[axis] + span[axis] + 1e-9:
            if axis == 0:
                x = (v - lo[0]) * scale + MARGIN
                out.append(f'<text x="{_fmt(x)}" y="{_fmt(y0 + 14)}" stroke="none" text-anchor="middle">{_fmt(v)}</text>')
            else:
                y = (hi[1] - v) * scale + MARGIN
                out.append(f'<text x="{_fmt(x0 - 4)}" y="{_fmt(y + 3)}" stroke="none" text-anchor="end">{_fmt(v)}</text>')
            v += step
    out.append("</g>")

    if frames:
        out.append(f'<g id="frames" fill="none" stroke="{FRAME_COLOR}" stroke-width="1" stroke-dasharray="6,4">')
        for i, f in enumerate(frames):
            out.append(f'<polygon class="frame" data-segment="{i}" points="{_path(px(f.corners_world()))}"/>')
        out.append("</g>")

    out.append('<g id="lanes" fill="none" stroke-width="2">')
    for lane in graph.lanes:
        out.append(
            f'<polyline class="lane {lane.kind.value}" data-id={quoteattr(lane.id)} '
            f'stroke="{COLORS[lane.kind]}" points="{_path(px(lane.xy))}"/>'
        )
    out.append("</g>")

    if trajectory is not None and len(trajectory):
        out.append(
            f'<polyline id="trajectory" fill="none" stroke="{TRAJECTORY_COLOR}" stroke-width="1.5" '
            f'points="{_path(px(trajectory.xy))}"/>'
        )

    out.append('<g id="rules" font-family="sans-serif" font-size="11" fill="#222222">')
    for lane in graph.lanes:
        rules = sorted(graph.rules_for_lane(lane.id), key=lambda r: r.canonical())
        if not rules:
            continue
        pts = px(lane.xy)
        mid = pts[len(pts) // 2]
        for k, rule in enumerate(rules):
            label = ", ".join(f"{key}={value}" for key, value in rule.kv)
            out.append(
                f'<text class="rule-label" data-lane={quoteattr(lane.id)} data-rule={quoteattr(rule.id)} '
                f'x="{_fmt(mid[0] + 4)}" y="{_fmt(mid[1] - 4 - 13 * k)}">{escape(label)}</text>'
            )
    for rule in graph.rules:
        if rule.sign_position is not None:
            p = px([rule.sign_position[:2]])[0]
            out.append(f'<circle class="sign" cx="{_fmt(p[0])}" cy="{_fmt(p[1])}" r="3" fill="#e69500"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
