import math

import numpy as np
import pytest

from conftest import straight_clip
from rulemap.map_model import (
    Clip,
    Lane,
    LaneKind,
    MapGraph,
    Pose,
    Rule,
    Trajectory,
    graph_equal,
    normalize_angle,
    polyline_deviation,
    validate_clip,
)
from rulemap.synth import generate


def test_normalize_angle_range():
    for th in [math.pi, -math.pi, 3 * math.pi, -7.0, 0.0, 1e-12]:
        v = normalize_angle(th)
        assert -math.pi <= v < math.pi
        assert math.isclose(math.cos(v), math.cos(th), abs_tol=1e-12)


def test_rule_equality_ignores_order_and_id():
    a = Rule("a", (("rule_type", "bus_lane"), ("vehicle_category", "bus")))
    b = Rule("b", (("vehicle_category", "bus"), ("rule_type", "bus_lane")))
    assert a == b and hash(a) == hash(b)
    assert a != Rule("c", (("rule_type", "bus_lane"),))


def test_validate_synth_clip_clean():
    assert validate_clip(generate("straight", 1, 0)[0]) == []


def test_validate_short_trajectory():
    clip = straight_clip(30.0)
    short = Clip(clip.clip_id, Trajectory(clip.trajectory.poses[:1]), clip.ground_truth)
    findings = [f for f in validate_clip(short) if f.severity == "error"]
    assert len(findings) == 1 and "trajectory too short" in findings[0].message


def test_validate_dangling_association():
    clip = straight_clip(30.0)
    gt = clip.ground_truth
    bad = MapGraph(gt.lanes, (Rule("r", (("rule_type", "bus_lane"),)),), frozenset({("r", "missing")}))
    findings = validate_clip(Clip(clip.clip_id, clip.trajectory, bad))
    assert len([f for f in findings if f.severity == "error"]) == 1


def test_validate_other_errors():
    poses = (Pose(0.0, 0, 0, 0), Pose(0.0, 0, 1, 0), Pose(1.0, 0, 20, 0))
    lane = Lane("a", LaneKind.DIVIDER, ((0, 0), (0, 0)))
    clip = Clip("c", Trajectory(poses), MapGraph((lane,), (Rule("r", (("colour", "red"),)),), frozenset({("r", "a")})))
    msgs = " | ".join(str(f) for f in validate_clip(clip))
    for needle in ("increasing", "step", "colour"):
        assert needle in msgs


def test_self_intersection_is_warning():
    lane = Lane("a", LaneKind.DIVIDER, ((0, 0), (2, 2), (2, 0), (0, 2)))
    clip = straight_clip(30.0)
    clip = Clip("c", clip.trajectory, MapGraph((lane,)))
    findings = validate_clip(clip)
    assert findings and all(f.severity == "warning" for f in findings)


def test_graph_equal_examples():
    g = generate("multi_sign", 1, 1)[0].ground_truth
    assert graph_equal(g, g, 0.0)
    lane = g.lanes[0]
    pts = list(lane.points)
    pts[3] = (pts[3][0] + 0.2, pts[3][1])
    moved = MapGraph((lane.with_points(pts),) + g.lanes[1:], g.rules, g.associations)
    assert not graph_equal(moved, g, 0.1)
    assert graph_equal(moved, g, 0.25)


def test_graph_equal_is_id_agnostic():
    a = MapGraph(
        (Lane("a", LaneKind.DIVIDER, ((0, 0), (0, 9))), Lane("b", LaneKind.DIVIDER, ((5, 0), (5, 9)))),
        (Rule("r", (("rule_type", "bus_lane"),)),),
        frozenset({("r", "b")}),
    )
    b = MapGraph(
        (Lane("y", LaneKind.DIVIDER, ((5, 0), (5, 9))), Lane("x", LaneKind.DIVIDER, ((0, 0), (0, 9)))),
        (Rule("q", (("rule_type", "bus_lane"),)),),
        frozenset({("q", "y")}),
    )
    assert graph_equal(a, b)
    c = MapGraph(b.lanes, b.rules, frozenset({("q", "x")}))
    assert not graph_equal(a, c)


def test_polyline_deviation_is_maxnorm():
    a = np.array([[0.0, 0.0], [10.0, 0.0]])
    b = a + [0.0, 0.05]
    assert polyline_deviation(a, b) == pytest.approx(0.05)
    diag = np.array([[0.0, 0.0], [10.0, 10.0]])
    assert polyline_deviation(diag, diag + [0.05, 0.05]) <= 0.05 + 1e-12
