"""Segment scheduling, the map-rule cache, per-segment inference and stitching."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codec import Diagnostic, Prompt, Token, parse, serialize_input, serialize_segment, strip_eos, to_text
from .config import RunConfig
from .errors import ModelFailure, PlanMismatch, ProtocolViolation, TrajectoryTooShort
from .geometry import (
    SegmentFrame,
    clip_polyline,
    clip_polyline_outside,
    clip_to_frame,
    end_heading,
    from_segment,
    pose_to_segment,
    quantize_pose,
    to_segment,
)
from .map_model import Clip, Lane, LaneKind, MapGraph, Pose, Rule, Trajectory, build_graph, normalize_angle, rules_by_lane
from .models import SegmentModel, SegmentRequest

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentPlan:
    frames: tuple[SegmentFrame, ...]
    advance_distance: float
    anchors: tuple[float, ...]  # arc length of each frame anchor

    def __len__(self) -> int:
        return len(self.frames)


def _interp_pose(traj: Trajectory, s_all: np.ndarray, s: float) -> Pose:
    xy = traj.xy
    theta = np.unwrap([p.theta for p in traj.poses])
    ts = [p.t for p in traj.poses]
    return Pose(
        float(np.interp(s, s_all, ts)),
        float(np.interp(s, s_all, xy[:, 0])),
        float(np.interp(s, s_all, xy[:, 1])),
        float(np.interp(s, s_all, theta)),
    )


def plan_segments(trajectory: Trajectory, template: SegmentFrame) -> SegmentPlan:
    """Place frame anchors every ``H * (1 - overlap)`` meters of arc length.

    The first anchor is the first pose; anchors are added until a frame
    reaches the end of the trajectory.
    """
    s_all = trajectory.arc_lengths()
    total = float(s_all[-1]) if len(s_all) else 0.0
    height = template.height
    if total < height - 1e-9:
        raise TrajectoryTooShort(f"trajectory length {total:.2f} m is shorter than one frame ({height:.2f} m)")
    advance = template.advance
    anchors = [0.0]
    while anchors[-1] + height < total - 1e-9:
        anchors.append(anchors[-1] + advance)
    frames = tuple(template.recentered(_interp_pose(trajectory, s_all, s)) for s in anchors)
    return SegmentPlan(frames, advance, tuple(anchors))


# ---------------------------------------------------------------------------
# map-rule cache


@dataclass(frozen=True)
class CacheStub:
    points: tuple[tuple[float, float], ...]  # next-frame local meters
    kind: LaneKind
    rules: tuple[tuple[tuple[str, str], ...], ...]  # full key/value payloads


@dataclass(frozen=True)
class MapRuleCache:
    stubs: tuple[CacheStub, ...] = ()

    def __len__(self) -> int:
        return len(self.stubs)

    def to_graph(self) -> MapGraph:
        lanes = []
        lane_rules = {}
        for i, stub in enumerate(self.stubs):
            lane = Lane(f"c{i}", stub.kind, stub.points)
            lanes.append(lane)
            lane_rules[lane.id] = [Rule("", kv) for kv in stub.rules]
        return build_graph(lanes, lane_rules)

    def tokens(self, frame: SegmentFrame, rule_keys=None) -> list[Token]:
        """Cache as a lane/rule token block (no end-of-sequence token)."""
        if not self.stubs:
            return []
        kwargs = {} if rule_keys is None else {"rule_keys": rule_keys}
        return strip_eos(serialize_segment(self.to_graph(), frame, **kwargs))


def extract_cache(graph: MapGraph, current: SegmentFrame, nxt: SegmentFrame) -> MapRuleCache:
    """Lane stubs in the leading overlap strip of ``current``, in ``nxt`` coordinates.

    The strip is ``y in [H - overlap_depth, H]`` of the current frame; each
    stub keeps the complete rule payloads of its source lane.
    """
    lane_rules = rules_by_lane(graph)
    y0 = current.height - current.overlap_depth
    stubs = []
    for lane in graph.lanes:
        payloads = tuple(r.kv for r in lane_rules.get(lane.id, []))
        for piece in clip_polyline(lane.xy, 0.0, y0, current.width, current.height):
            local_next, _ = to_segment(nxt, from_segment(current, piece))
            for part in clip_to_frame(nxt, local_next):
                stubs.append(CacheStub(tuple(map(tuple, part.tolist())), lane.kind, payloads))
    return MapRuleCache(tuple(stubs))


# ---------------------------------------------------------------------------
# per-segment inference


@dataclass
class SegmentResult:
    index: int
    graph: MapGraph
    diagnostics: list = field(default_factory=list)
    output_text: str = ""
    failure: str | None = None  # "model" | "protocol" when the model failed
    error: str | None = None
    seconds: float = 0.0
    model_info: dict = field(default_factory=dict)


def select_poses(trajectory: Trajectory, frame: SegmentFrame, limit: int) -> list[Pose]:
    """Poses inside the frame, thinned evenly to at most ``limit`` (first and last kept)."""
    poses = trajectory.poses
    local, inside = to_segment(frame, trajectory.xy)
    chosen = [p for p, ok in zip(poses, np.atleast_1d(inside)) if ok]
    if len(chosen) > limit:
        idx = np.unique(np.round(np.linspace(0, len(chosen) - 1, limit)).astype(int))
        chosen = [chosen[i] for i in idx]
    return chosen


def run_segment(
    model: SegmentModel,
    request: SegmentRequest,
    rule_keys: Sequence[str],
) -> SegmentResult:
    """Invoke the model and parse its answer in recovery mode.

    :class:`ModelFailure` propagates to the caller, which decides how to
    record the failed segment.
    """
    start = time.perf_counter()
    tokens = model.generate(request)
    graph, diags = parse(tokens, request.frame, recover=True, rule_keys=rule_keys)
    return SegmentResult(
        request.segment_id,
        graph,
        diags,
        to_text(tokens),
        seconds=time.perf_counter() - start,
        model_info=dict(getattr(model, "last_model_info", None) or {}),
    )


def build_request(
    clip: Clip,
    index: int,
    frame: SegmentFrame,
    cache: MapRuleCache,
    prompt: Prompt | None,
    config: RunConfig,
) -> SegmentRequest:
    poses = select_poses(clip.trajectory, frame, config.images_per_segment)
    images = dict(clip.images)
    image_paths = tuple(images.get(p.t, "") for p in poses)
    cache_tokens = cache.tokens(frame, config.rule_keys)
    quantized = tuple(quantize_pose(frame, pose_to_segment(frame, p), config.angle_bins) for p in poses)
    input_tokens = serialize_input(poses, frame, image_paths, cache_tokens, prompt, config.angle_bins)
    return SegmentRequest(
        segment_id=index,
        clip_id=clip.clip_id,
        frame=frame,
        poses=quantized,
        image_paths=image_paths,
        cache_tokens=tuple(cache_tokens),
        prompt=prompt,
        input_tokens=tuple(input_tokens),
    )


# ---------------------------------------------------------------------------
# stitching


@dataclass
class StitchedMap:
    graph: MapGraph
    provenance: dict  # lane id -> [(segment index, number of points), ...] in travel order
    diagnostics: dict


@dataclass
class _Chain:
    points: np.ndarray
    kind: LaneKind
    rules: set
    pieces: list  # [(segment, n_points)]


def _angle_diff(a: float, b: float) -> float:
    return abs(normalize_angle(a - b))


def _retained_fragments(graphs: Sequence[MapGraph], frames: Sequence[SegmentFrame]):
    """World-frame lane pieces with overlap regions handed to the later segment."""
    out = []
    for i, (graph, frame) in enumerate(zip(graphs, frames)):
        lane_rules = rules_by_lane(graph)
        for lane in graph.lanes:
            pieces = [from_segment(frame, lane.xy)]
            for later in frames[i + 1 :]:
                kept = []
                for piece in pieces:
                    local, _ = to_segment(later, piece)
                    for part in clip_polyline_outside(local, 0.0, 0.0, later.width, later.height):
                        kept.append(from_segment(later, part))
                pieces = kept
            payloads = {r.canonical() for r in lane_rules.get(lane.id, [])}
            for piece in pieces:
                out.append((i, piece, lane.kind, payloads))
    return out


def stitch(
    graphs: Sequence[MapGraph],
    plan: SegmentPlan,
    join_epsilon: float = 0.5,
    join_heading_deg: float = 30.0,
) -> StitchedMap:
    """Merge per-segment (segment-local) graphs into one world-frame map.

    Inside each overlap the succeeding segment's geometry wins. Fragments
    whose facing endpoints lie within ``join_epsilon`` and whose end
    headings agree within ``join_heading_deg`` are joined; joined lanes
    carry the union of their fragments' rules.
    """
    if len(graphs) != len(plan.frames):
        raise PlanMismatch(f"{len(graphs)} segment graphs for {len(plan.frames)} planned segments")
    gate = math.radians(join_heading_deg)
    chains: list[_Chain] = []
    joins = []
    for seg, pts, kind, payloads in _retained_fragments(graphs, plan.frames):
        head, tail = pts[0], pts[-1]
        head_dir = end_heading(pts, at_start=True)
        tail_dir = end_heading(pts, at_start=False)
        best = None
        for c in chains:
            if any(piece_seg == seg for piece_seg, _ in c.pieces):
                continue
            gap = float(np.hypot(*(c.points[-1] - head)))
            if gap <= join_epsilon and _angle_diff(end_heading(c.points, False), head_dir) <= gate:
                if best is None or gap < best[0]:
                    best = (gap, c, "append")
            gap = float(np.hypot(*(c.points[0] - tail)))
            if gap <= join_epsilon and _angle_diff(end_heading(c.points, True), tail_dir) <= gate:
                if best is None or gap < best[0]:
                    best = (gap, c, "prepend")
        if best is None:
            chains.append(_Chain(pts, kind, set(payloads), [(seg, len(pts))]))
            continue
        gap, c, side = best
        if side == "append":
            new = pts[1:] if gap < 1e-9 else pts
            c.points = np.vstack([c.points, new])
            c.pieces.append((seg, len(new)))
        else:
            new = pts[:-1] if gap < 1e-9 else pts
            c.points = np.vstack([new, c.points])
            c.pieces.insert(0, (seg, len(new)))
        c.rules |= payloads
        joins.append({"segment": seg, "gap": gap})

    lanes, lane_rules, provenance = [], {}, {}
    for n, c in enumerate(chains):
        lane = Lane(f"L{n}", c.kind, tuple(map(tuple, c.points.tolist())))
        lanes.append(lane)
        lane_rules[lane.id] = [Rule("", kv) for kv in sorted(c.rules)]
        provenance[lane.id] = [list(p) for p in c.pieces]
    graph = build_graph(lanes, lane_rules)
    gaps = _find_gaps(lanes, join_epsilon, gate, search=plan.frames[0].height if plan.frames else 0.0)
    return StitchedMap(graph, provenance, {"joins": joins, "gaps": gaps})


def _find_gaps(lanes: Sequence[Lane], eps: float, gate: float, search: float) -> list[dict]:
    """Unbridged breaks: a lane end with another lane starting ahead of it, in line."""
    gaps = []
    for a in lanes:
        tail = a.xy[-1]
        direction = end_heading(a.xy, at_start=False)
        fwd = np.array([math.cos(direction), math.sin(direction)])
        best = None
        for b in lanes:
            if b.id == a.id:
                continue
            d = b.xy[0] - tail
            along = float(d @ fwd)
            lateral = abs(float(d[0] * fwd[1] - d[1] * fwd[0]))
            dist = float(np.hypot(*d))
            if dist <= eps or along <= 0 or along > search or lateral > 2 * eps:
                continue
            if _angle_diff(end_heading(b.xy, at_start=True), direction) > gate:
                continue
            if best is None or dist < best["distance"]:
                best = {"from_lane": a.id, "to_lane": b.id, "distance": dist}
        if best is not None:
            gaps.append(best)
    return gaps


# ---------------------------------------------------------------------------
# whole clip


@dataclass
class ClipRun:
    clip_id: str
    plan: SegmentPlan
    segments: list[SegmentResult]
    stitched: StitchedMap

    @property
    def failed(self) -> list[SegmentResult]:
        return [s for s in self.segments if s.failure is not None]


def run_clip(
    clip: Clip,
    model: SegmentModel,
    config: RunConfig = RunConfig(),
    prompt: Prompt | None = None,
) -> ClipRun:
    """Plan, run every segment in order (threading the cache), and stitch."""
    plan = plan_segments(clip.trajectory, config.frame_template())
    model.begin_clip(clip, plan.frames)
    cache = MapRuleCache()
    results: list[SegmentResult] = []
    for i, frame in enumerate(plan.frames):
        request = build_request(clip, i, frame, cache if config.use_cache else MapRuleCache(), prompt, config)
        try:
            result = run_segment(model, request, config.rule_keys)
        except ModelFailure as exc:
            kind = "protocol" if isinstance(exc, ProtocolViolation) else "model"
            log.warning("clip %s segment %d: %s: %s", clip.clip_id, i, type(exc).__name__, exc)
            result = SegmentResult(i, MapGraph(), failure=kind, error=f"{type(exc).__name__}: {exc}")
        results.append(result)
        if i + 1 < len(plan.frames):
            cache = extract_cache(result.graph, frame, plan.frames[i + 1])
    stitched = stitch(
        [r.graph for r in results], plan, config.join_epsilon, config.join_heading_deg
    )
    stitched.diagnostics["failed_segments"] = [r.index for r in results if r.failure]
    stitched.diagnostics["parse_diagnostics"] = sum(len(r.diagnostics) for r in results)
    return ClipRun(clip.clip_id, plan, results, stitched)
