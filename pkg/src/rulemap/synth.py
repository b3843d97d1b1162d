"""Deterministic synthetic clips with ground-truth lanes, rules and signs."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BadScenario
from .map_model import Clip, Lane, LaneKind, MapGraph, Pose, Rule, Trajectory, heading_of

SCENARIOS = ("straight", "curve", "lane_change", "merge", "multi_sign", "occlusion")

LANE_WIDTH = 3.5
POINT_SPACING = 1.0  # meters between lane vertices along the road
POSE_SPACING = 2.0
SPEED = 10.0  # m/s, only used for timestamps
SIGN_HEIGHT = 2.5
IMAGE_SIZE = (1920, 1080)

RULE_TEMPLATES = (
    (("rule_type", "bus_lane"), ("vehicle_category", "bus"), ("time_window", "07:00-09:00")),
    (("rule_type", "bus_lane"), ("vehicle_category", "bus"), ("time_window", "17:00-19:00")),
    (("rule_type", "no_parking"), ("time_window", "00:00-24:00")),
    (("rule_type", "speed_limit"), ("speed_limit", "40")),
    (("rule_type", "speed_limit"), ("speed_limit", "60")),
    (("rule_type", "hov_lane"), ("vehicle_category", "car"), ("time_window", "07:00-10:00")),
    (("rule_type", "truck_ban"), ("vehicle_category", "truck")),
    (("rule_type", "turn_restriction"), ("direction", "straight")),
    (("rule_type", "tidal_lane"), ("direction", "left"), ("time_window", "16:30-19:30")),
)


def parse_scenario(spec: str) -> tuple[str, dict]:
    """``"curve(radius=80)"``, ``"curve:80"`` or a bare name."""
    m = re.fullmatch(r"\s*(\w+)\s*(?:\((.*)\)|:(.*))?\s*", spec)
    if not m or m.group(1) not in SCENARIOS:
        raise BadScenario(f"unknown scenario {spec!r}; choose from {', '.join(SCENARIOS)}")
    name = m.group(1)
    params: dict = {}
    raw = m.group(2) if m.group(2) is not None else m.group(3)
    if raw:
        for i, part in enumerate(p.strip() for p in raw.split(",") if p.strip()):
            key, _, value = part.rpartition("=")
            key = key.strip() or ("radius" if name == "curve" and i == 0 else "")
            if key != "radius" or name != "curve":
                raise BadScenario(f"unsupported parameter {part!r} for {name}")
            try:
                params["radius"] = float(value)
            except ValueError:
                raise BadScenario(f"bad radius {value!r}") from None
            if params["radius"] < 30.0:
                raise BadScenario("curve radius must be at least 30 m")
    return name, params


@dataclass
class _Road:
    """Centerline as origin + initial heading, curvature 1/radius (0 = straight)."""

    origin: np.ndarray
    theta0: float
    curvature: float = 0.0

    def frame_at(self, s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Point, unit forward and unit right vectors at arc length ``s``."""
        theta = self.theta0 + self.curvature * s
        fwd = np.array([-math.sin(theta), math.cos(theta)])
        right = np.array([fwd[1], -fwd[0]])
        if self.curvature == 0.0:
            p = self.origin + s * np.array([-math.sin(self.theta0), math.cos(self.theta0)])
        else:
            r = 1.0 / self.curvature
            # center of the turning circle sits to the left for positive curvature
            f0 = np.array([-math.sin(self.theta0), math.cos(self.theta0)])
            left0 = np.array([-f0[1], f0[0]])
            center = self.origin + r * left0
            p = center - r * np.array([-fwd[1], fwd[0]])
        return p, fwd, right

    def polyline(self, offset: Callable[[float], float], s0: float, s1: float, step: float = POINT_SPACING) -> np.ndarray:
        n = max(int(math.ceil((s1 - s0) / step - 1e-9)), 1)
        out = []
        for s in np.linspace(s0, s1, n + 1):
            p, _, right = self.frame_at(float(s))
            out.append(p + offset(float(s)) * right)
        return np.array(out)


def _const(v: float) -> Callable[[float], float]:
    return lambda s: v


def _blend(a: float, b: float, s0: float, s1: float) -> Callable[[float], float]:
    """Smooth cosine transition from offset ``a`` to ``b`` over [s0, s1]."""

    def f(s: float) -> float:
        if s <= s0:
            return a
        if s >= s1:
            return b
        w = 0.5 - 0.5 * math.cos(math.pi * (s - s0) / (s1 - s0))
        return a + (b - a) * w

    return f


def _trajectory(road: _Road, ego: Callable[[float], float], length: float) -> Trajectory:
    n = max(int(math.ceil(length / POSE_SPACING - 1e-9)), 1)
    poses = []
    t = 0.0
    prev = None
    h = 1e-4
    for s in np.linspace(0.0, length, n + 1):
        s = float(s)
        p = road.polyline(ego, s, s + h, h)
        # heading from the exact path tangent, not a chord between poses
        d = p[1] - p[0]
        if prev is not None:
            t += float(np.hypot(*(p[0] - prev))) / SPEED
        prev = p[0]
        poses.append(Pose(round(t, 6), float(p[0][0]), float(p[0][1]), heading_of(float(d[0]), float(d[1]))))
    return Trajectory(tuple(poses))


class _Builder:
    def __init__(self, clip_id: str, rng: np.random.Generator, road: _Road, length: float):
        self.clip_id = clip_id
        self.rng = rng
        self.road = road
        self.length = length
        self.lanes: list[Lane] = []
        self.rules: list[Rule] = []
        self.assoc: set = set()
        self.prompts: list = []
        self._templates = list(rng.permutation(len(RULE_TEMPLATES)))
        self._used_uv: set = set()

    def lane(self, kind: LaneKind, offset, s0: float = 0.0, s1: float | None = None) -> str:
        lid = f"lane{len(self.lanes)}"
        pts = self.road.polyline(offset, s0, self.length if s1 is None else s1)
        self.lanes.append(Lane(lid, kind, tuple(map(tuple, np.round(pts, 6).tolist()))))
        return lid

    def rule(self, lanes: list[str], sign_s: float, sign_offset: float) -> str:
        rid = f"rule{len(self.rules)}"
        template = RULE_TEMPLATES[int(self._templates.pop(0))]
        p, _, right = self.road.frame_at(sign_s)
        xy = p + sign_offset * right
        self.rules.append(Rule(rid, template, (round(float(xy[0]), 6), round(float(xy[1]), 6), SIGN_HEIGHT)))
        self.assoc.update((rid, l) for l in lanes)
        while True:
            uv = (int(self.rng.integers(200, IMAGE_SIZE[0] - 200)), int(self.rng.integers(100, IMAGE_SIZE[1] // 2)))
            if uv not in self._used_uv:
                break
        self._used_uv.add(uv)
        self.prompts.append((rid, uv))
        return rid

    def build(self, ego) -> Clip:
        traj = _trajectory(self.road, ego, self.length)
        images = tuple((p.t, f"images/{self.clip_id}/{i:04d}.jpg") for i, p in enumerate(traj.poses))
        gt = MapGraph(tuple(self.lanes), tuple(self.rules), frozenset(self.assoc))
        return Clip(self.clip_id, traj, gt, images, tuple(self.prompts))


def _standard_lanes(b: _Builder, offsets: list[float]) -> list[str]:
    ids = []
    for i, off in enumerate(offsets):
        kind = LaneKind.BORDERLINE if i in (0, len(offsets) - 1) else LaneKind.DIVIDER
        ids.append(b.lane(kind, _const(off)))
    return ids


def make_clip(scenario: str, rng: np.random.Generator, clip_id: str) -> Clip:
    name, params = parse_scenario(scenario)
    origin = rng.uniform(-500.0, 500.0, size=2).round(3)
    theta0 = float(rng.uniform(-math.pi, math.pi))
    three = [-1.5 * LANE_WIDTH, -0.5 * LANE_WIDTH, 0.5 * LANE_WIDTH, 1.5 * LANE_WIDTH]

    if name == "curve":
        radius = params.get("radius", float(rng.choice([50.0, 60.0, 80.0, 120.0])))
        side = 1.0 if rng.random() < 0.5 else -1.0
        length = float(rng.uniform(50.0, 80.0))
        b = _Builder(clip_id, rng, _Road(origin, theta0, side / radius), length)
        ids = _standard_lanes(b, three)
        b.rule(ids[2:], float(rng.uniform(4.0, 12.0)), 2.0 * LANE_WIDTH)
        return b.build(_const(0.0))

    if name == "occlusion":
        length = float(rng.uniform(110.0, 140.0))
        b = _Builder(clip_id, rng, _Road(origin, theta0), length)
        ids = _standard_lanes(b, three)
        b.rule(ids[2:], float(rng.uniform(3.0, 9.0)), 2.0 * LANE_WIDTH)
        return b.build(_const(0.0))

    length = float(rng.uniform(60.0, 110.0))
    b = _Builder(clip_id, rng, _Road(origin, theta0), length)

    if name == "straight":
        n_lanes = int(rng.integers(2, 4))
        offsets = three if n_lanes == 3 else [-1.5 * LANE_WIDTH, -0.5 * LANE_WIDTH, 0.5 * LANE_WIDTH]
        ids = _standard_lanes(b, offsets)
        b.rule(ids[-2:], float(rng.uniform(4.0, 15.0)), offsets[-1] + 1.5)
        return b.build(_const(0.0))

    if name == "lane_change":
        ids = _standard_lanes(b, [-LANE_WIDTH, 0.0, LANE_WIDTH])
        b.rule(ids[1:], float(rng.uniform(4.0, 15.0)), 1.5 * LANE_WIDTH)
        start = float(rng.uniform(15.0, 25.0))
        return b.build(_blend(-0.5 * LANE_WIDTH, 0.5 * LANE_WIDTH, start, start + 30.0))

    if name == "merge":
        merge_at = float(rng.uniform(25.0, 40.0))
        taper = 15.0
        left = b.lane(LaneKind.BORDERLINE, _const(three[0]))
        mid = b.lane(LaneKind.DIVIDER, _const(three[1]))
        ending = b.lane(LaneKind.DIVIDER, _const(three[2]), 0.0, merge_at)
        right = b.lane(LaneKind.BORDERLINE, _blend(three[3], three[2], merge_at, merge_at + taper))
        b.rule([ending, right], float(rng.uniform(4.0, 12.0)), 2.0 * LANE_WIDTH)
        b.rule([left, mid], float(rng.uniform(4.0, 12.0)), -2.0 * LANE_WIDTH)
        return b.build(_const(-0.5 * LANE_WIDTH))

    if name == "multi_sign":
        ids = _standard_lanes(b, three)
        b.rule(ids[2:], float(rng.uniform(4.0, 10.0)), 2.0 * LANE_WIDTH)
        b.rule(ids[:2], float(rng.uniform(12.0, 20.0)), -2.0 * LANE_WIDTH)
        if rng.random() < 0.5:
            b.rule(ids[1:3], float(rng.uniform(25.0, 35.0)), 2.0 * LANE_WIDTH)
        return b.build(_const(0.0))

    raise BadScenario(name)  # pragma: no cover - parse_scenario guards this


def generate(scenario: str, count: int, seed: int) -> list[Clip]:
    """``count`` clips of one scenario; identical arguments give identical clips."""
    name, _ = parse_scenario(scenario)
    tag = re.sub(r"[^A-Za-z0-9]+", "_", scenario.strip()).strip("_")
    clips = []
    for k in range(count):
        rng = np.random.default_rng([seed, SCENARIOS.index(name), k])
        clips.append(make_clip(scenario, rng, f"{tag}-s{seed}-{k:03d}"))
    return clips


def suite(per_scenario: int = 9, seed: int = 0) -> list[Clip]:
    """Clips across every scenario, ``per_scenario`` each."""
    out = []
    for name in SCENARIOS:
        out.extend(generate(name, per_scenario, seed))
    return out
