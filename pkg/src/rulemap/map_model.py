"""Domain types: poses, trajectories, lanes, rules, map graphs and clips."""

from __future__ import annotations

import enum
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

DEFAULT_RULE_KEYS: tuple[str, ...] = (
    "rule_type",
    "vehicle_category",
    "time_window",
    "speed_limit",
    "direction",
)

MAX_POSE_STEP = 5.0  # meters between consecutive trajectory poses


def normalize_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    out = wrapped - math.pi
    # fmod can land exactly on +pi after the shift for inputs like 3*pi
    return -math.pi if out >= math.pi else out


def heading_vector(theta: float) -> tuple[float, float]:
    """Unit travel direction for a heading.

    Headings are measured counter-clockwise from the world +y axis, so
    ``theta == 0`` drives north and ``theta == pi/2`` drives west.
    """
    return (-math.sin(theta), math.cos(theta))


def heading_of(dx: float, dy: float) -> float:
    return normalize_angle(math.atan2(-dx, dy))


@dataclass(frozen=True)
class Pose:
    t: float
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[Pose, ...]

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def xy(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self.poses], dtype=float).reshape(-1, 2)

    def arc_lengths(self) -> np.ndarray:
        xy = self.xy
        if len(xy) == 0:
            return np.zeros(0)
        steps = np.hypot(*np.diff(xy, axis=0).T) if len(xy) > 1 else np.zeros(0)
        return np.concatenate([[0.0], np.cumsum(steps)])

    @property
    def length(self) -> float:
        s = self.arc_lengths()
        return float(s[-1]) if len(s) else 0.0


class LaneKind(str, enum.Enum):
    DIVIDER = "divider"
    BORDERLINE = "borderline"


@dataclass(frozen=True)
class Lane:
    id: str
    kind: LaneKind
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "kind", LaneKind(self.kind))
        object.__setattr__(
            self, "points", tuple((float(x), float(y)) for x, y in self.points)
        )

    @property
    def xy(self) -> np.ndarray:
        return np.array(self.points, dtype=float).reshape(-1, 2)

    def with_points(self, points, id: str | None = None) -> "Lane":
        return Lane(self.id if id is None else id, self.kind, tuple(map(tuple, points)))


@dataclass(frozen=True, eq=False)
class Rule:
    """A traffic rule as ordered key/value pairs.

    Two rules compare equal when their key/value *sets* agree; ids and key
    order are ignored.
    """

    id: str
    kv: tuple[tuple[str, str], ...]
    sign_position: tuple[float, float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kv", tuple((str(k), str(v)) for k, v in self.kv))
        if self.sign_position is not None:
            object.__setattr__(
                self, "sign_position", tuple(float(c) for c in self.sign_position)
            )

    @property
    def kv_set(self) -> frozenset:
        return frozenset(self.kv)

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.kv)

    def canonical(self) -> tuple[tuple[str, str], ...]:
        return tuple(sorted(self.kv))

    def __eq__(self, other):
        if not isinstance(other, Rule):
            return NotImplemented
        return self.kv_set == other.kv_set

    def __hash__(self):
        return hash(self.kv_set)


@dataclass(frozen=True)
class MapGraph:
    lanes: tuple[Lane, ...] = ()
    rules: tuple[Rule, ...] = ()
    associations: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(
            self, "associations", frozenset((str(r), str(l)) for r, l in self.associations)
        )

    def lane(self, lane_id: str) -> Lane:
        for lane in self.lanes:
            if lane.id == lane_id:
                return lane
        raise KeyError(lane_id)

    def rule(self, rule_id: str) -> Rule:
        for rule in self.rules:
            if rule.id == rule_id:
                return rule
        raise KeyError(rule_id)

    def rules_for_lane(self, lane_id: str) -> list[Rule]:
        ids = {r for r, l in self.associations if l == lane_id}
        return [r for r in self.rules if r.id in ids]

    def is_empty(self) -> bool:
        return not self.lanes and not self.rules


@dataclass(frozen=True)
class Clip:
    clip_id: str
    trajectory: Trajectory
    ground_truth: MapGraph
    images: tuple[tuple[float, str], ...] = ()
    sign_prompts: tuple[tuple[str, tuple[int, int]], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "images", tuple((float(t), str(p)) for t, p in self.images))
        object.__setattr__(
            self,
            "sign_prompts",
            tuple((str(r), (int(uv[0]), int(uv[1]))) for r, uv in self.sign_prompts),
        )


@dataclass(frozen=True)
class Finding:
    severity: str  # "error" | "warning"
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.location}: {self.message}"


def _lane_findings(lane: Lane, where: str) -> list[Finding]:
    from shapely.geometry import LineString

    out = []
    if len(lane.points) < 2:
        out.append(Finding("error", where, "lane has fewer than 2 points"))
        return out
    for i in range(1, len(lane.points)):
        if lane.points[i] == lane.points[i - 1]:
            out.append(Finding("error", f"{where}.points[{i}]", "repeated consecutive point"))
    if not out and not LineString(lane.points).is_simple:
        out.append(Finding("warning", where, "lane polyline self-intersects"))
    return out


def validate_clip(clip: Clip, rule_keys: Sequence[str] = DEFAULT_RULE_KEYS) -> list[Finding]:
    """Check every type invariant of a clip; findings are returned, never raised."""
    findings: list[Finding] = []
    poses = clip.trajectory.poses
    if len(poses) < 2:
        findings.append(Finding("error", "trajectory", "trajectory too short"))
    for i, pose in enumerate(poses):
        if not (-math.pi <= pose.theta < math.pi):
            findings.append(Finding("error", f"trajectory[{i}]", "heading not in [-pi, pi)"))
        if i == 0:
            continue
        prev = poses[i - 1]
        if pose.t <= prev.t:
            findings.append(Finding("error", f"trajectory[{i}]", "timestamps not strictly increasing"))
        step = math.hypot(pose.x - prev.x, pose.y - prev.y)
        if step > MAX_POSE_STEP:
            findings.append(
                Finding("error", f"trajectory[{i}]", f"pose step {step:.2f} m exceeds {MAX_POSE_STEP} m")
            )

    gt = clip.ground_truth
    lane_ids = Counter(l.id for l in gt.lanes)
    for lid, n in lane_ids.items():
        if n > 1:
            findings.append(Finding("error", f"lanes[{lid}]", "duplicate lane id"))
    for lane in gt.lanes:
        findings.extend(_lane_findings(lane, f"lanes[{lane.id}]"))

    rule_ids = Counter(r.id for r in gt.rules)
    for rid, n in rule_ids.items():
        if n > 1:
            findings.append(Finding("error", f"rules[{rid}]", "duplicate rule id"))
    allowed = set(rule_keys)
    for rule in gt.rules:
        where = f"rules[{rule.id}]"
        if not rule.kv:
            findings.append(Finding("error", where, "rule has no key/value pairs"))
        keys = Counter(rule.keys)
        for key, n in keys.items():
            if n > 1:
                findings.append(Finding("error", where, f"duplicate key {key!r}"))
            if key not in allowed:
                findings.append(Finding("error", where, f"key {key!r} not in rule vocabulary"))

    for rid, lid in sorted(gt.associations):
        if rid not in rule_ids:
            findings.append(Finding("error", f"associations[{rid},{lid}]", f"unknown rule {rid!r}"))
        if lid not in lane_ids:
            findings.append(Finding("error", f"associations[{rid},{lid}]", f"unknown lane {lid!r}"))

    stamps = {p.t for p in poses}
    for i, (t, _) in enumerate(clip.images):
        if t not in stamps:
            findings.append(Finding("error", f"images[{i}]", "timestamp matches no trajectory pose"))
    for i, (rid, _) in enumerate(clip.sign_prompts):
        if rid not in rule_ids:
            findings.append(Finding("error", f"sign_prompts[{i}]", f"unknown rule {rid!r}"))
    return findings


def _point_segment_maxnorm(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Max-norm distance from each point in ``p`` (n,2) to each segment a->b (m,2).

    The objective along the segment is convex and piecewise linear, so the
    minimum sits at an endpoint, a zero of one coordinate term, or where the
    two terms cross.
    """
    e = p[:, None, :] - a[None, :, :]  # (n, m, 2)
    d = (b - a)[None, :, :]
    ex, ey = e[..., 0], e[..., 1]
    dx, dy = d[..., 0], d[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cands = [
            np.zeros_like(ex),
            np.ones_like(ex),
            ex / dx,
            ey / dy,
            (ex - ey) / (dx - dy),
            (ex + ey) / (dx + dy),
        ]
    best = np.full(ex.shape, np.inf)
    for t in cands:
        t = np.clip(np.nan_to_num(t, nan=0.0, posinf=1.0, neginf=0.0), 0.0, 1.0)
        f = np.maximum(np.abs(ex - t * dx), np.abs(ey - t * dy))
        best = np.minimum(best, f)
    return best.min(axis=1)


def polyline_deviation(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric vertex-to-polyline deviation between two polylines (max-norm).

    The max-norm matches the per-axis quantization bound, so a polyline and
    its quantized copy deviate by at most half a bin.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)

    def one_way(src, dst):
        if len(dst) == 1:
            return float(np.abs(src - dst[0]).max(axis=1).max())
        return float(_point_segment_maxnorm(src, dst[:-1], dst[1:]).max())

    return max(one_way(a, b), one_way(b, a))


def _pair_lanes(a: MapGraph, b: MapGraph, tol: float) -> dict[str, str] | None:
    if len(a.lanes) != len(b.lanes):
        return None
    if not a.lanes:
        return {}
    cost = np.array(
        [[polyline_deviation(la.xy, lb.xy) for lb in b.lanes] for la in a.lanes]
    )
    feasible = cost <= tol + 1e-9
    # infeasible edges get a cost no feasible matching can reach
    big = (cost[feasible].sum() if feasible.any() else 0.0) + 1e6
    rows, cols = linear_sum_assignment(np.where(feasible, cost, big))
    if not feasible[rows, cols].all():
        return None
    return {a.lanes[i].id: b.lanes[j].id for i, j in zip(rows, cols)}


def graph_equal(a: MapGraph, b: MapGraph, tol: float = 0.0) -> bool:
    """Id-agnostic map comparison.

    Lanes are paired one-to-one with per-lane deviation at most ``tol``,
    rules by key/value set, and the association structure must agree under
    those pairings.
    """
    if tol < 0:
        raise ValueError("tol must be non-negative")
    pairing = _pair_lanes(a, b, tol)
    if pairing is None:
        return False
    if Counter(r.kv_set for r in a.rules) != Counter(r.kv_set for r in b.rules):
        return False
    a_rules = {r.id: r.kv_set for r in a.rules}
    b_rules = {r.id: r.kv_set for r in b.rules}
    mapped = Counter((a_rules.get(r), pairing.get(l)) for r, l in a.associations)
    other = Counter((b_rules.get(r), l) for r, l in b.associations)
    return mapped == other


def rules_by_lane(graph: MapGraph) -> dict[str, list[Rule]]:
    rules = {r.id: r for r in graph.rules}
    out: dict[str, list[Rule]] = defaultdict(list)
    for rid, lid in graph.associations:
        if rid in rules:
            out[lid].append(rules[rid])
    for lid in out:
        out[lid].sort(key=Rule.canonical)
    return dict(out)


def build_graph(lanes: Iterable[Lane], lane_rules: dict[str, Iterable[Rule]]) -> MapGraph:
    """Assemble a graph from lanes and per-lane rule payloads.

    Rules with equal key/value sets collapse into one rule governing every
    lane that carried it. Rule ids are assigned in first-seen order.
    """
    lanes = list(lanes)
    by_kv: dict[frozenset, Rule] = {}
    assoc = set()
    for lane in lanes:
        for rule in lane_rules.get(lane.id, ()):
            key = rule.kv_set
            if key not in by_kv:
                by_kv[key] = Rule(f"r{len(by_kv)}", rule.kv, rule.sign_position)
            assoc.add((by_kv[key].id, lane.id))
    return MapGraph(tuple(lanes), tuple(by_kv.values()), frozenset(assoc))
