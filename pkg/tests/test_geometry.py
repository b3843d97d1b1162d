import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rulemap.errors import ConfigError, EmptyExtent, EmptyUnion, ExtentMismatch, OutOfFrame
from rulemap.geometry import (
    Extent,
    LaneMask,
    SegmentFrame,
    clip_polyline,
    clip_to_frame,
    dequantize,
    dequantize_points,
    from_segment,
    mask_iou,
    pose_from_segment,
    pose_to_segment,
    quantize,
    quantize_points,
    quantize_pose,
    rasterize_lane,
    slice_graph,
    to_segment,
)
from rulemap.map_model import Lane, LaneKind, MapGraph, Pose


def _rect_iou(d: float, width: float = 6.0) -> float:
    """Two equal-length parallel strips offset laterally by d."""
    inter = max(width - d, 0.0)
    return inter / (2 * width - inter)


def _matrix_to_segment(center, p, W=22.4):
    # independent formulation: translate, then rotate by -theta with an explicit matrix
    c, s = math.cos(center[2]), math.sin(center[2])
    rot = np.array([[c, s], [-s, c]])
    return rot @ (np.asarray(p) - np.asarray(center[:2])) + np.array([W / 2, 0.0])


def test_frame_defaults(frame0):
    assert frame0.width == pytest.approx(22.4)
    assert frame0.height == pytest.approx(22.4)
    assert frame0.overlap_depth == pytest.approx(2.24)
    assert frame0.advance == pytest.approx(20.16)


@pytest.mark.parametrize("delta", [0.0, 0.5, 0.7, -0.1])
def test_overlap_ratio_rejected(delta):
    with pytest.raises(ConfigError):
        SegmentFrame(Pose(0, 0, 0, 0), overlap_ratio=delta)


def test_to_segment_examples(frame0):
    local, inside = to_segment(frame0, (1.0, 2.0))
    assert local == pytest.approx((12.2, 2.0))
    assert inside
    f = SegmentFrame(Pose(0.0, 5.0, 5.0, math.pi / 2))
    local, _ = to_segment(f, (5.0, 5.0))
    assert local == pytest.approx((11.2, 0.0))


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-math.pi, math.pi - 1e-9),
    st.floats(-50, 50), st.floats(-50, 50),
)
def test_to_segment_matches_matrix_and_inverts(cx, cy, th, dx, dy):
    f = SegmentFrame(Pose(0.0, cx, cy, th))
    p = (cx + dx, cy + dy)
    local, _ = to_segment(f, p)
    assert np.allclose(local, _matrix_to_segment((cx, cy, th), p), atol=1e-9)
    assert np.allclose(from_segment(f, local), p, atol=1e-7)


def test_heading_points_along_local_y():
    f = SegmentFrame(Pose(0.0, 10.0, -4.0, 0.7))
    ahead = np.array([10.0, -4.0]) + 5.0 * np.array([-math.sin(0.7), math.cos(0.7)])
    local, inside = to_segment(f, ahead)
    assert local == pytest.approx((11.2, 5.0))
    assert inside


def test_pose_roundtrip():
    f = SegmentFrame(Pose(0.0, 3.0, 4.0, 2.5))
    p = Pose(1.0, 5.0, 9.0, -2.9)
    back = pose_from_segment(f, pose_to_segment(f, p))
    assert (back.x, back.y) == pytest.approx((p.x, p.y))
    assert math.isclose(math.cos(back.theta - p.theta), 1.0, abs_tol=1e-12)


def test_quantize_examples(frame0):
    assert tuple(quantize(frame0, (11.2, 11.2))) == (112, 112)
    assert tuple(quantize(frame0, (0.0, 0.0))) == (0, 0)
    assert dequantize(frame0, (0, 0)) == pytest.approx((0.05, 0.05))


def test_quantize_out_of_frame(frame0):
    for p in [(-0.01, 1.0), (1.0, 22.4), (22.4, 0.0)]:
        with pytest.raises(OutOfFrame):
            quantize(frame0, p)


def test_quantization_bound_random(frame0):
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.0, 22.4, size=(10_000, 2))
    pts = pts[(pts < 22.4).all(axis=1)]
    err = np.abs(dequantize_points(frame0, quantize_points(frame0, pts)) - pts).max()
    assert err <= 0.05 + 1e-12


def test_pose_angle_bins(frame0):
    assert quantize_pose(frame0, Pose(0, 11.2, 0.0, 0.0))[2] == 128
    assert quantize_pose(frame0, Pose(0, 11.2, 0.0, -math.pi))[2] == 0
    assert quantize_pose(frame0, Pose(0, 11.2, 0.0, math.pi - 1e-6))[2] == 255


def test_clip_polyline_splits():
    pts = np.array([[-1.0, 1.0], [2.0, 1.0], [2.0, 5.0], [-1.0, 5.0], [-1.0, 8.0], [1.0, 8.0]])
    pieces = clip_polyline(pts, 0.0, 0.0, 10.0, 10.0)
    assert len(pieces) == 2
    assert pieces[0][0] == pytest.approx((0.0, 1.0))
    assert pieces[0][-1] == pytest.approx((0.0, 5.0))


def test_clip_to_frame_never_out_of_range(frame0):
    rng = np.random.default_rng(3)
    for _ in range(200):
        pts = rng.uniform(-10, 35, size=(6, 2))
        for piece in clip_to_frame(frame0, pts):
            quantize_points(frame0, piece)  # raises if anything escaped


def test_slice_graph_keeps_associations(frame0):
    lane = Lane("a", LaneKind.DIVIDER, ((11.0, -5.0), (11.0, 30.0)))
    from rulemap.map_model import Rule

    g = MapGraph((lane,), (Rule("r", (("rule_type", "bus_lane"),)),), frozenset({("r", "a")}))
    s = slice_graph(g, frame0)
    assert len(s.lanes) == 1
    ys = s.lanes[0].xy[:, 1]
    assert ys.min() == pytest.approx(0.0) and ys.max() == pytest.approx(22.4)
    assert s.associations == {("r", "a")}


# --- rasterization -----------------------------------------------------------


@pytest.mark.parametrize("length", [10.0, 3.0, 27.5])
def test_raster_area_rectangle(length):
    mask = rasterize_lane(np.array([[0.0, 0.0], [0.0, length]]), 3.0, 0.1)
    assert mask.area == pytest.approx(6.0 * length, rel=0.02)


def test_raster_polyline_has_round_joins():
    # right angle: two 20x6 strips sharing a 3x3 square, plus a quarter disc on the outer corner
    pts = np.array([[0.0, 0.0], [0.0, 20.0], [20.0, 20.0]])
    mask = rasterize_lane(pts, 3.0, 0.1)
    expected = 2 * 20 * 6 - 9.0 + math.pi * 9.0 / 4
    assert mask.area == pytest.approx(expected, rel=0.02)


def test_raster_empty_extent():
    with pytest.raises(EmptyExtent):
        rasterize_lane(np.array([[0.0, 0.0], [0.0, 10.0]]), 3.0, 0.1, Extent(0.0, 0.0, 0.0, 10.0))


@pytest.mark.parametrize("d", [0.0, 1.0, 2.0, 3.0, 5.0, 6.0])
def test_iou_matches_rectangle_formula(d):
    a = np.array([[0.0, 0.0], [0.0, 20.0]])
    b = a + [d, 0.0]
    ext = Extent.around([a, b], 3.2, 0.1)
    iou = mask_iou(rasterize_lane(a, 3.0, 0.1, ext), rasterize_lane(b, 3.0, 0.1, ext))
    assert iou == pytest.approx(_rect_iou(d), abs=0.02)


def test_iou_spec_values():
    assert _rect_iou(3.0) == pytest.approx(1 / 3)
    assert _rect_iou(1.0) == pytest.approx(5 / 7)


def test_iou_identical_and_errors():
    a = rasterize_lane(np.array([[0.0, 0.0], [0.0, 5.0]]), 3.0, 0.1)
    assert mask_iou(a, a) == 1.0
    b = rasterize_lane(np.array([[50.0, 0.0], [50.0, 5.0]]), 3.0, 0.1)
    with pytest.raises(ExtentMismatch):
        mask_iou(a, b)
    empty = LaneMask(np.zeros_like(a.data), a.resolution, a.extent)
    with pytest.raises(EmptyUnion):
        mask_iou(empty, empty)
