"""On-disk clip and map files.

Both are UTF-8 JSON with a versioned header::

    {"format": "rulemap.clip", "version": 1, "clip_id": ..., "trajectory": [[t, x, y, theta], ...],
     "lanes": [{"id", "kind", "points"}], "rules": [{"id", "kv", "sign_position"}],
     "associations": [[rule_id, lane_id], ...], "images": [[t, path]], "sign_prompts": [[rule_id, [u, v]]]}

    {"format": "rulemap.map", "version": 1, "clip_id": ..., "lanes": ..., "rules": ...,
     "associations": ..., "provenance": {...}, "diagnostics": {...}, "frames": [...]}

Floats are rounded to 6 decimals and keys sorted so equal inputs give equal bytes.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

from .errors import RulemapError
from .geometry import SegmentFrame
from .map_model import Clip, Lane, MapGraph, Pose, Rule, Trajectory

CLIP_FORMAT = "rulemap.clip"
MAP_FORMAT = "rulemap.map"
FORMAT_VERSION = 1


class FileFormatError(RulemapError, ValueError):
    pass


def _r(v: float) -> float:
    v = round(float(v), 6)
    return 0.0 if v == 0 else v  # no "-0.0" in output


def atomic_write(path: str | Path, data: str | bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _round_tree(obj):
    if isinstance(obj, float):
        return _r(obj)
    if isinstance(obj, dict):
        return {k: _round_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_tree(v) for v in obj]
    return obj


def dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def graph_to_json(graph: MapGraph) -> dict:
    return {
        "lanes": [
            {"id": l.id, "kind": l.kind.value, "points": [[_r(x), _r(y)] for x, y in l.points]}
            for l in graph.lanes
        ],
        "rules": [
            {
                "id": r.id,
                "kv": [list(kv) for kv in r.kv],
                "sign_position": None if r.sign_position is None else [_r(c) for c in r.sign_position],
            }
            for r in graph.rules
        ],
        "associations": sorted([r, l] for r, l in graph.associations),
    }


def graph_from_json(obj: dict) -> MapGraph:
    try:
        lanes = tuple(Lane(l["id"], l["kind"], tuple(map(tuple, l["points"]))) for l in obj.get("lanes", ()))
        rules = tuple(
            Rule(r["id"], tuple(map(tuple, r["kv"])), r.get("sign_position")) for r in obj.get("rules", ())
        )
        assoc = frozenset((a[0], a[1]) for a in obj.get("associations", ()))
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"bad map graph: {exc}") from None
    return MapGraph(lanes, rules, assoc)


def _check_header(obj, fmt: str, path) -> None:
    if not isinstance(obj, dict) or obj.get("format") != fmt:
        raise FileFormatError(f"{path}: not a {fmt} file")
    if obj.get("version") != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported {fmt} version {obj.get('version')!r}")


def clip_to_json(clip: Clip) -> dict:
    out = {"format": CLIP_FORMAT, "version": FORMAT_VERSION, "clip_id": clip.clip_id}
    out["trajectory"] = [[_r(p.t), _r(p.x), _r(p.y), _r(p.theta)] for p in clip.trajectory.poses]
    out.update(graph_to_json(clip.ground_truth))
    out["images"] = [[_r(t), path] for t, path in clip.images]
    out["sign_prompts"] = [[rid, list(uv)] for rid, uv in clip.sign_prompts]
    return out


def clip_from_json(obj: dict, path="<memory>") -> Clip:
    _check_header(obj, CLIP_FORMAT, path)
    try:
        poses = tuple(Pose(*map(float, p)) for p in obj["trajectory"])
        return Clip(
            str(obj["clip_id"]),
            Trajectory(poses),
            graph_from_json(obj),
            tuple((t, p) for t, p in obj.get("images", ())),
            tuple((r, tuple(uv)) for r, uv in obj.get("sign_prompts", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"{path}: {exc}") from None


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: {exc}") from None


def save_clip(clip: Clip, path) -> None:
    atomic_write(path, dumps(clip_to_json(clip)))


def load_clip(path) -> Clip:
    return clip_from_json(_load_json(path), path)


def frame_to_json(frame: SegmentFrame) -> dict:
    c = frame.center
    return {
        "center": [_r(c.t), _r(c.x), _r(c.y), _r(c.theta)],
        "width_bins": frame.width_bins,
        "height_bins": frame.height_bins,
        "bin_size": frame.bin_size,
        "overlap_ratio": frame.overlap_ratio,
    }


def frame_from_json(obj: dict) -> SegmentFrame:
    return SegmentFrame(
        Pose(*map(float, obj["center"])),
        int(obj["width_bins"]),
        int(obj["height_bins"]),
        float(obj["bin_size"]),
        float(obj["overlap_ratio"]),
    )


def map_to_json(run) -> dict:
    """Serialize a :class:`~rulemap.pipeline.ClipRun`'s stitched map."""
    out = {"format": MAP_FORMAT, "version": FORMAT_VERSION, "clip_id": run.clip_id}
    out.update(graph_to_json(run.stitched.graph))
    out["provenance"] = {k: [list(p) for p in v] for k, v in run.stitched.provenance.items()}
    out["diagnostics"] = _round_tree(run.stitched.diagnostics)
    out["frames"] = [frame_to_json(f) for f in run.plan.frames]
    return out


class MapFile:
    """A loaded map file: graph plus the plan frames it was built from."""

    def __init__(self, clip_id: str, graph: MapGraph, frames: list, provenance: dict, diagnostics: dict):
        self.clip_id = clip_id
        self.graph = graph
        self.frames = frames
        self.provenance = provenance
        self.diagnostics = diagnostics


def save_map(run, path) -> None:
    atomic_write(path, dumps(map_to_json(run)))


def load_map(path) -> MapFile:
    obj = _load_json(path)
    _check_header(obj, MAP_FORMAT, path)
    try:
        frames = [frame_from_json(f) for f in obj.get("frames", ())]
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"{path}: bad frame: {exc}") from None
    return MapFile(
        str(obj.get("clip_id", "")),
        graph_from_json(obj),
        frames,
        obj.get("provenance", {}),
        obj.get("diagnostics", {}),
    )


def load_any(path):
    """Load a clip or map file; returns ``(kind, object)`` with kind "clip" or "map"."""
    obj = _load_json(path)
    fmt = obj.get("format") if isinstance(obj, dict) else None
    if fmt == CLIP_FORMAT:
        return "clip", clip_from_json(obj, path)
    if fmt == MAP_FORMAT:
        return "map", load_map(path)
    raise FileFormatError(f"{path}: unknown file format {fmt!r}")
