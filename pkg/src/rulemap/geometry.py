"""Segment frames, rigid transforms, quantization, clipping and lane rasters."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, EmptyExtent, EmptyUnion, ExtentMismatch, OutOfFrame
from .map_model import Lane, MapGraph, Pose, normalize_angle

DEFAULT_BINS = 224
DEFAULT_BIN_SIZE = 0.1
DEFAULT_OVERLAP = 0.10
DEFAULT_ANGLE_BINS = 256
DEFAULT_HALF_WIDTH = 3.0
DEFAULT_RESOLUTION = 0.1

_EPS = 1e-9
_EDGE = 1e-6  # how far far-edge points are pulled inside the frame


@dataclass(frozen=True)
class SegmentFrame:
    """Ego-aligned W x H window.

    Local axes: +y along the ego heading, +x to the ego's right. The origin
    is the midpoint of the rear edge so the ego sits at ``(width / 2, 0)``.
    """

    center: Pose
    width_bins: int = DEFAULT_BINS
    height_bins: int = DEFAULT_BINS
    bin_size: float = DEFAULT_BIN_SIZE
    overlap_ratio: float = DEFAULT_OVERLAP

    def __post_init__(self):
        if self.width_bins < 1 or self.height_bins < 1:
            raise ConfigError("bin counts must be positive")
        if not self.bin_size > 0:
            raise ConfigError("bin_size must be positive")
        if not 0.0 < self.overlap_ratio < 0.5:
            raise ConfigError("overlap_ratio must lie in (0, 0.5)")

    @property
    def width(self) -> float:
        return self.width_bins * self.bin_size

    @property
    def height(self) -> float:
        return self.height_bins * self.bin_size

    @property
    def overlap_depth(self) -> float:
        return self.overlap_ratio * self.height

    @property
    def advance(self) -> float:
        return self.height * (1.0 - self.overlap_ratio)

    def recentered(self, center: Pose) -> "SegmentFrame":
        return SegmentFrame(center, self.width_bins, self.height_bins, self.bin_size, self.overlap_ratio)

    def contains(self, local) -> np.ndarray | bool:
        local = np.asarray(local, dtype=float)
        x, y = local[..., 0], local[..., 1]
        # compare in bin units so the test agrees with the bin quantize() picks
        inside = (
            (x >= 0) & (np.floor(x / self.bin_size + _EPS) < self.width_bins)
            & (y >= 0) & (np.floor(y / self.bin_size + _EPS) < self.height_bins)
        )
        return bool(inside) if inside.ndim == 0 else inside

    def corners_world(self) -> np.ndarray:
        """Frame outline in world coordinates, counter-clockwise from rear-left."""
        local = np.array([[0.0, 0.0], [self.width, 0.0], [self.width, self.height], [0.0, self.height]])
        return from_segment(self, local)


class QuantizedPoint(NamedTuple):
    u: int
    v: int


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_segment(frame: SegmentFrame, p) -> tuple[np.ndarray, np.ndarray | bool]:
    """World point(s) to segment-local meters.

    Returns ``(local, inside)``; points outside the frame are not clamped,
    ``inside`` flags them instead.
    """
    p = np.asarray(p, dtype=float)
    c = frame.center
    offset = p - np.array([c.x, c.y])
    local = offset @ _rotation(-c.theta).T + np.array([frame.width / 2.0, 0.0])
    return local, frame.contains(local)


def from_segment(frame: SegmentFrame, local) -> np.ndarray:
    local = np.asarray(local, dtype=float)
    c = frame.center
    shifted = local - np.array([frame.width / 2.0, 0.0])
    return shifted @ _rotation(c.theta).T + np.array([c.x, c.y])


def pose_to_segment(frame: SegmentFrame, pose: Pose) -> Pose:
    local, _ = to_segment(frame, (pose.x, pose.y))
    return Pose(pose.t, float(local[0]), float(local[1]), pose.theta - frame.center.theta)


def pose_from_segment(frame: SegmentFrame, pose: Pose) -> Pose:
    world = from_segment(frame, (pose.x, pose.y))
    return Pose(pose.t, float(world[0]), float(world[1]), pose.theta + frame.center.theta)


def quantize_points(frame: SegmentFrame, pts) -> np.ndarray:
    """Vectorized :func:`quantize`; returns an (n, 2) int array of (u, v)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    bad = ~np.asarray(frame.contains(pts)).reshape(-1)
    if bad.any():
        i = int(np.argmax(bad))
        raise OutOfFrame(f"point {tuple(pts[i])} outside frame [0, {frame.width}) x [0, {frame.height})")
    # tiny bias so values like 11.2 / 0.1 = 111.999... land in bin 112
    u = np.floor(pts[:, 0] / frame.bin_size + _EPS).astype(int)
    v = np.floor(pts[:, 1] / frame.bin_size + _EPS).astype(int)
    u = np.clip(u, 0, frame.width_bins - 1)
    v = np.clip(v, 0, frame.height_bins - 1)
    return np.stack([u, v], axis=1)


def quantize(frame: SegmentFrame, p) -> QuantizedPoint:
    u, v = quantize_points(frame, [p])[0]
    return QuantizedPoint(int(u), int(v))


def dequantize_points(frame: SegmentFrame, uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    return (uv + 0.5) * frame.bin_size


def dequantize(frame: SegmentFrame, q) -> tuple[float, float]:
    x, y = dequantize_points(frame, [q])[0]
    return float(x), float(y)


def quantize_pose(frame: SegmentFrame, pose: Pose, angle_bins: int = DEFAULT_ANGLE_BINS) -> tuple[int, int, int]:
    """Quantize a segment-local pose to ``(u, v, a)``."""
    u, v = quantize(frame, (pose.x, pose.y))
    a = math.floor((pose.theta + math.pi) / (2.0 * math.pi) * angle_bins + _EPS) % angle_bins
    return u, v, int(a)


def dequantize_pose(
    frame: SegmentFrame, uva: Sequence[int], angle_bins: int = DEFAULT_ANGLE_BINS, t: float = 0.0
) -> Pose:
    u, v, a = uva
    x, y = dequantize(frame, (u, v))
    theta = (a + 0.5) / angle_bins * 2.0 * math.pi - math.pi
    return Pose(t, x, y, theta)


def clip_polyline(points, xmin: float, ymin: float, xmax: float, ymax: float) -> list[np.ndarray]:
    """Clip a polyline to a closed axis-aligned box (Liang-Barsky per segment).

    Returns the inside pieces in order; a polyline leaving and re-entering
    the box yields several pieces. Zero-length pieces are dropped.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    pieces: list[list[np.ndarray]] = []
    current: list[np.ndarray] | None = None
    for a, b in zip(pts[:-1], pts[1:]):
        d = b - a
        t0, t1 = 0.0, 1.0
        ok = True
        for p, q in ((-d[0], a[0] - xmin), (d[0], xmax - a[0]), (-d[1], a[1] - ymin), (d[1], ymax - a[1])):
            if p == 0.0:
                if q < 0.0:
                    ok = False
                    break
                continue
            r = q / p
            if p < 0.0:
                t0 = max(t0, r)
            else:
                t1 = min(t1, r)
            if t0 > t1:
                ok = False
                break
        if not ok:
            current = None
            continue
        start, end = a + t0 * d, a + t1 * d
        if current is not None and t0 == 0.0:
            current.append(end)
        else:
            current = [start, end]
            pieces.append(current)
        if t1 < 1.0:
            current = None
    out = []
    for piece in pieces:
        arr = np.array(piece)
        keep = np.concatenate([[True], np.any(np.abs(np.diff(arr, axis=0)) > 1e-12, axis=1)])
        arr = arr[keep]
        if len(arr) >= 2:
            out.append(arr)
    return out


def clip_polyline_outside(points, xmin: float, ymin: float, xmax: float, ymax: float) -> list[np.ndarray]:
    """Pieces of a polyline lying outside a closed box (complement of :func:`clip_polyline`)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    pieces: list[list[np.ndarray]] = []
    current: list[np.ndarray] | None = None

    def extend(a, b):
        nonlocal current
        if current is not None and np.allclose(current[-1], a, atol=0.0, rtol=0.0):
            current.append(b)
        else:
            current = [a, b]
            pieces.append(current)

    for a, b in zip(pts[:-1], pts[1:]):
        d = b - a
        t0, t1 = 0.0, 1.0
        hit = True
        for p, q in ((-d[0], a[0] - xmin), (d[0], xmax - a[0]), (-d[1], a[1] - ymin), (d[1], ymax - a[1])):
            if p == 0.0:
                if q < 0.0:
                    hit = False
                    break
                continue
            r = q / p
            if p < 0.0:
                t0 = max(t0, r)
            else:
                t1 = min(t1, r)
            if t0 > t1:
                hit = False
                break
        if not hit:
            extend(a, b)
            continue
        if t0 > 0.0:
            extend(a, a + t0 * d)
        current = None
        if t1 < 1.0:
            extend(a + t1 * d, b)
    out = []
    for piece in pieces:
        arr = np.array(piece)
        keep = np.concatenate([[True], np.any(np.abs(np.diff(arr, axis=0)) > 1e-12, axis=1)])
        arr = arr[keep]
        if len(arr) >= 2:
            out.append(arr)
    return out


def point_polyline_distance(points, polyline) -> np.ndarray:
    """Euclidean distance from each point to a polyline."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    line = np.asarray(polyline, dtype=float).reshape(-1, 2)
    if len(line) == 1:
        return np.hypot(*(p - line[0]).T)
    a, b = line[:-1], line[1:]
    d = b - a
    dd = np.maximum((d * d).sum(axis=1), 1e-18)
    e = p[:, None, :] - a[None, :, :]
    t = np.clip((e * d[None]).sum(axis=2) / dd[None], 0.0, 1.0)
    diff = e - t[..., None] * d[None]
    return np.sqrt((diff**2).sum(axis=2)).min(axis=1)


def clip_to_frame(frame: SegmentFrame, local_points) -> list[np.ndarray]:
    """Clip segment-local geometry to the frame so every point quantizes.

    Points landing on the far edges are pulled just inside, since the
    frame is half-open.
    """
    pieces = clip_polyline(local_points, 0.0, 0.0, frame.width, frame.height)
    out = []
    for piece in pieces:
        piece = piece.copy()
        piece[:, 0] = np.clip(piece[:, 0], 0.0, frame.width - _EDGE)
        piece[:, 1] = np.clip(piece[:, 1], 0.0, frame.height - _EDGE)
        out.append(piece)
    return out


# ---------------------------------------------------------------------------
# graph-level frame operations


def graph_to_world(graph: MapGraph, frame: SegmentFrame) -> MapGraph:
    lanes = tuple(l.with_points(from_segment(frame, l.xy)) for l in graph.lanes)
    return MapGraph(lanes, graph.rules, graph.associations)


def graph_to_segment(graph: MapGraph, frame: SegmentFrame) -> MapGraph:
    lanes = tuple(l.with_points(to_segment(frame, l.xy)[0]) for l in graph.lanes)
    return MapGraph(lanes, graph.rules, graph.associations)


def slice_graph(world_graph: MapGraph, frame: SegmentFrame) -> MapGraph:
    """Portion of a world-frame graph inside ``frame``, in segment-local meters.

    Lanes are clipped to the frame; a lane split into several pieces keeps
    its associations on every piece. Rules governing no surviving lane are
    dropped.
    """
    lanes = []
    assoc = set()
    by_lane: dict[str, list[str]] = {}
    for rid, lid in world_graph.associations:
        by_lane.setdefault(lid, []).append(rid)
    for lane in world_graph.lanes:
        local, _ = to_segment(frame, lane.xy)
        pieces = clip_to_frame(frame, local)
        for k, piece in enumerate(pieces):
            pid = lane.id if len(pieces) == 1 else f"{lane.id}#{k}"
            lanes.append(Lane(pid, lane.kind, tuple(map(tuple, piece))))
            for rid in by_lane.get(lane.id, ()):
                assoc.add((rid, pid))
    used = {r for r, _ in assoc}
    rules = tuple(r for r in world_graph.rules if r.id in used)
    return MapGraph(tuple(lanes), rules, frozenset(assoc))


# ---------------------------------------------------------------------------
# rasterization


@dataclass(frozen=True)
class Extent:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def union(self, other: "Extent") -> "Extent":
        return Extent(
            min(self.xmin, other.xmin),
            min(self.ymin, other.ymin),
            max(self.xmax, other.xmax),
            max(self.ymax, other.ymax),
        )

    @classmethod
    def around(cls, polylines, pad: float, resolution: float) -> "Extent":
        """Bounding box of ``polylines`` padded by ``pad`` and snapped to the pixel grid."""
        pts = np.concatenate([np.asarray(p, dtype=float).reshape(-1, 2) for p in polylines])
        lo = np.floor((pts.min(axis=0) - pad) / resolution) * resolution
        hi = np.ceil((pts.max(axis=0) + pad) / resolution) * resolution
        return cls(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


@dataclass(frozen=True, eq=False)
class LaneMask:
    data: np.ndarray  # bool, shape (ny, nx); row j covers y in [ymin + j*res, ymin + (j+1)*res)
    resolution: float
    extent: Extent

    @property
    def area(self) -> float:
        return float(self.data.sum()) * self.resolution**2


def _grid_shape(extent: Extent, resolution: float) -> tuple[int, int]:
    nx = int(math.ceil((extent.xmax - extent.xmin) / resolution - 1e-6))
    ny = int(math.ceil((extent.ymax - extent.ymin) / resolution - 1e-6))
    return ny, nx


def rasterize_lane(
    points,
    half_width: float = DEFAULT_HALF_WIDTH,
    resolution: float = DEFAULT_RESOLUTION,
    extent: Extent | None = None,
) -> LaneMask:
    """Expand a polyline into a fixed-width binary mask.

    A pixel is set when its center lies within ``half_width`` of the
    polyline. The two polyline ends are capped flat; interior joints are
    rounded so bends leave no notches.
    """
    if not half_width > 0 or not resolution > 0:
        raise ValueError("half_width and resolution must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if extent is None:
        extent = Extent.around([pts], half_width + resolution, resolution)
    ny, nx = _grid_shape(extent, resolution)
    if nx <= 0 or ny <= 0:
        raise EmptyExtent(f"degenerate extent {extent}")
    mask = np.zeros((ny, nx), dtype=bool)
    nseg = len(pts) - 1
    for k in range(nseg):
        a, b = pts[k], pts[k + 1]
        d = b - a
        dd = float(d @ d)
        if dd == 0.0:
            continue
        lo = np.minimum(a, b) - half_width
        hi = np.maximum(a, b) + half_width
        i0 = max(int(math.floor((lo[0] - extent.xmin) / resolution)), 0)
        i1 = min(int(math.ceil((hi[0] - extent.xmin) / resolution)), nx)
        j0 = max(int(math.floor((lo[1] - extent.ymin) / resolution)), 0)
        j1 = min(int(math.ceil((hi[1] - extent.ymin) / resolution)), ny)
        if i0 >= i1 or j0 >= j1:
            continue
        xs = extent.xmin + (np.arange(i0, i1) + 0.5) * resolution
        ys = extent.ymin + (np.arange(j0, j1) + 0.5) * resolution
        px = xs[None, :] - a[0]
        py = ys[:, None] - a[1]
        t = (px * d[0] + py * d[1]) / dd
        valid = np.ones_like(t, dtype=bool)
        if k == 0:
            valid &= t >= 0.0
        if k == nseg - 1:
            valid &= t <= 1.0
        tc = np.clip(t, 0.0, 1.0)
        dist2 = (px - tc * d[0]) ** 2 + (py - tc * d[1]) ** 2
        mask[j0:j1, i0:i1] |= valid & (dist2 <= half_width * half_width)
    return LaneMask(mask, resolution, extent)


def _same_grid(a: LaneMask, b: LaneMask) -> bool:
    ea, eb = a.extent, b.extent
    return (
        a.data.shape == b.data.shape
        and math.isclose(a.resolution, b.resolution)
        and np.allclose([ea.xmin, ea.ymin, ea.xmax, ea.ymax], [eb.xmin, eb.ymin, eb.xmax, eb.ymax])
    )


def mask_iou(a: LaneMask, b: LaneMask) -> float:
    if not _same_grid(a, b):
        raise ExtentMismatch("masks differ in resolution or extent")
    union = np.count_nonzero(a.data | b.data)
    if union == 0:
        raise EmptyUnion("both masks are empty")
    return np.count_nonzero(a.data & b.data) / union


def polyline_length(points) -> float:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return float(np.hypot(*np.diff(pts, axis=0).T).sum()) if len(pts) > 1 else 0.0


def end_heading(points, at_start: bool, span: float = 1.0) -> float:
    """Direction (radians, world atan2 convention) of the first/last ``span`` meters."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if at_start:
        pts = pts[::-1]
    # walk back from the end until span meters are covered
    end = pts[-1]
    acc = 0.0
    ref = pts[-2]
    for k in range(len(pts) - 2, -1, -1):
        acc += float(np.hypot(*(pts[k + 1] - pts[k])))
        ref = pts[k]
        if acc >= span:
            break
    d = end - ref
    angle = math.atan2(d[1], d[0])
    # for the start we walked the reversed polyline, flip back to travel direction
    return normalize_angle(angle + math.pi) if at_start else angle


def lane_in_world(lane: Lane, frame: SegmentFrame) -> Lane:
    return lane.with_points(from_segment(frame, lane.xy))
