"""Segment model backends.

Every backend answers a :class:`SegmentRequest` with output tokens. The
built-in backends answer from ground truth; :class:`AdapterModel` talks to
an external process over line-delimited JSON on stdin/stdout (see
``docs/protocol.md``).
"""

from __future__ import annotations

import json
import logging
import os
import queue
import subprocess
import threading
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import EOS, Prompt, Token, from_text, parse, serialize_segment, strip_eos, to_text
from .errors import AdapterTimeout, ConfigError, ProcessExit, ProtocolViolation
from .geometry import SegmentFrame, clip_to_frame, point_polyline_distance, slice_graph
from .map_model import DEFAULT_RULE_KEYS, Clip, Lane, MapGraph, Pose

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
CACHE_MATCH_RADIUS = 0.5  # meters between a cache stub and the lane it continues


@dataclass(frozen=True)
class SegmentRequest:
    segment_id: int
    clip_id: str
    frame: SegmentFrame
    poses: tuple[tuple[int, int, int], ...] = ()
    image_paths: tuple[str, ...] = ()
    cache_tokens: tuple[Token, ...] = ()
    prompt: Prompt | None = None
    input_tokens: tuple[Token, ...] = ()

    def to_json(self) -> dict:
        c = self.frame.center
        return {
            "protocol_version": PROTOCOL_VERSION,
            "segment_id": self.segment_id,
            "clip_id": self.clip_id,
            "frame": {
                "center": {"t": c.t, "x": c.x, "y": c.y, "theta": c.theta},
                "width_bins": self.frame.width_bins,
                "height_bins": self.frame.height_bins,
                "bin_size": self.frame.bin_size,
                "overlap_ratio": self.frame.overlap_ratio,
            },
            "poses": [list(p) for p in self.poses],
            "image_paths": list(self.image_paths),
            "cache_tokens": to_text(self.cache_tokens),
            "prompt": self.prompt.to_json() if self.prompt is not None else None,
            "input_tokens": to_text(self.input_tokens),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SegmentRequest":
        f = obj["frame"]
        c = f["center"]
        frame = SegmentFrame(
            Pose(c["t"], c["x"], c["y"], c["theta"]),
            f["width_bins"],
            f["height_bins"],
            f["bin_size"],
            f["overlap_ratio"],
        )
        return cls(
            segment_id=int(obj["segment_id"]),
            clip_id=str(obj["clip_id"]),
            frame=frame,
            poses=tuple(tuple(int(x) for x in p) for p in obj.get("poses", ())),
            image_paths=tuple(obj.get("image_paths", ())),
            cache_tokens=tuple(from_text(obj.get("cache_tokens", ""))),
            prompt=Prompt.from_json(obj.get("prompt")),
            input_tokens=tuple(from_text(obj.get("input_tokens", ""))),
        )


def encode_record(obj: dict) -> bytes:
    """One wire record: compact, key-sorted JSON plus a newline."""
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")


def decode_response(line: bytes | str, segment_id: int) -> tuple[str, dict]:
    """Validate one response record; returns ``(token_text, model_info)``."""
    try:
        obj = json.loads(line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolViolation(f"response is not JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolViolation("response is not a JSON object")
    version = obj.get("protocol_version", PROTOCOL_VERSION)
    if version != PROTOCOL_VERSION:
        raise ProtocolViolation(f"unsupported protocol_version {version!r}")
    if obj.get("segment_id") != segment_id:
        raise ProtocolViolation(f"segment_id {obj.get('segment_id')!r} does not answer request {segment_id}")
    tokens = obj.get("tokens")
    if not isinstance(tokens, str):
        raise ProtocolViolation("response lacks a string 'tokens' field")
    info = obj.get("model_info") or {}
    if not isinstance(info, dict):
        raise ProtocolViolation("model_info must be an object")
    return tokens, info


# ---------------------------------------------------------------------------
# ground-truth backends


def prompted_rule_ids(prompt: Prompt | None, sign_prompts) -> set[str] | None:
    """Rules selected by a coordinate prompt, or None when nothing is filtered."""
    if prompt is None or prompt.coord is None:
        return None
    target = tuple(prompt.coord)
    return {rid for rid, uv in sign_prompts if tuple(uv) == target}


def _filter_rules(graph: MapGraph, keep) -> MapGraph:
    assoc = frozenset((r, l) for r, l in graph.associations if keep(r, l))
    used = {r for r, _ in assoc}
    return MapGraph(graph.lanes, tuple(r for r in graph.rules if r.id in used), assoc)


def oracle_generate(
    gt: MapGraph,
    frame: SegmentFrame,
    cache_tokens: Sequence[Token] = (),
    prompt: Prompt | None = None,
    sign_prompts=(),
    rule_keys: Sequence[str] = DEFAULT_RULE_KEYS,
) -> list[Token]:
    """Answer a segment straight from ground truth.

    The cache is ignored: ground truth already covers the geometry and,
    with every sign visible, every rule.
    """
    local = slice_graph(gt, frame)
    selected = prompted_rule_ids(prompt, sign_prompts)
    if selected is not None:
        local = _filter_rules(local, lambda r, l: r in selected)
    return serialize_segment(local, frame, rule_keys)


@dataclass(frozen=True)
class NoiseSpec:
    point_jitter_sigma: float = 0.0
    lane_drop_prob: float = 0.0
    rule_drop_prob: float = 0.0
    sign_visibility_segments: int | None = None

    def __post_init__(self):
        if self.point_jitter_sigma < 0:
            raise ConfigError("point_jitter_sigma must be >= 0")
        for name in ("lane_drop_prob", "rule_drop_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.sign_visibility_segments is not None and self.sign_visibility_segments < 1:
            raise ConfigError("sign_visibility_segments must be >= 1")


def _cache_carries(cache_graph: MapGraph, lane: Lane, kv_set: frozenset) -> bool:
    for stub in cache_graph.lanes:
        if not any(r.kv_set == kv_set for r in cache_graph.rules_for_lane(stub.id)):
            continue
        if point_polyline_distance(stub.xy, lane.xy).max() <= CACHE_MATCH_RADIUS:
            return True
    return False


def noisy_generate(
    gt: MapGraph,
    frame: SegmentFrame,
    cache_tokens: Sequence[Token],
    prompt: Prompt | None,
    noise: NoiseSpec,
    rng: np.random.Generator,
    visible_rules: set[str] | None = None,
    sign_prompts=(),
    rule_keys: Sequence[str] = DEFAULT_RULE_KEYS,
) -> list[Token]:
    """Ground truth degraded by jitter, drops and limited sign visibility.

    ``visible_rules`` lists the rules whose sign can be seen from this
    segment (None means all). Any other rule is emitted on a lane only when
    the incoming cache carries it on a stub continuing that lane.
    """
    local = slice_graph(gt, frame)
    selected = prompted_rule_ids(prompt, sign_prompts)
    if selected is not None:
        local = _filter_rules(local, lambda r, l: r in selected)

    if visible_rules is not None:
        cache_graph = parse(strip_eos(cache_tokens) + [EOS], frame, recover=True, rule_keys=rule_keys).graph
        kv = {r.id: r.kv_set for r in local.rules}
        lanes = {l.id: l for l in local.lanes}
        local = _filter_rules(
            local,
            lambda r, l: r in visible_rules or _cache_carries(cache_graph, lanes[l], kv[r]),
        )

    if noise.rule_drop_prob > 0 and local.rules:
        dropped = {r.id for r in sorted(local.rules, key=lambda r: r.id) if rng.random() < noise.rule_drop_prob}
        local = _filter_rules(local, lambda r, l: r not in dropped)

    lanes = []
    assoc = set()
    for lane in sorted(local.lanes, key=lambda l: l.id):
        if noise.lane_drop_prob > 0 and rng.random() < noise.lane_drop_prob:
            continue
        pts = lane.xy
        if noise.point_jitter_sigma > 0:
            pts = pts + rng.normal(0.0, noise.point_jitter_sigma, size=pts.shape)
        pieces = clip_to_frame(frame, pts) if noise.point_jitter_sigma > 0 else [pts]
        for k, piece in enumerate(pieces):
            pid = lane.id if k == 0 else f"{lane.id}~{k}"
            lanes.append(Lane(pid, lane.kind, tuple(map(tuple, piece))))
            assoc.update((r, pid) for r, l in local.associations if l == lane.id)
    used = {r for r, _ in assoc}
    noisy = MapGraph(tuple(lanes), tuple(r for r in local.rules if r.id in used), frozenset(assoc))
    return serialize_segment(noisy, frame, rule_keys)


class SegmentModel:
    """Base class for segment backends.

    Given identical requests (and seed) a backend must return identical
    tokens. ``begin_clip`` is called once before a clip's segments run.
    """

    supports_images = False
    supports_prompt = False

    def __init__(self, seed: int = 0):
        self.seed = seed

    def begin_clip(self, clip: Clip, frames: Sequence[SegmentFrame]) -> None:
        pass

    def generate(self, request: SegmentRequest) -> list[Token]:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class OracleModel(SegmentModel):
    supports_prompt = True

    def __init__(self, seed: int = 0, rule_keys: Sequence[str] = DEFAULT_RULE_KEYS):
        super().__init__(seed)
        self.rule_keys = tuple(rule_keys)
        self._clip: Clip | None = None

    def begin_clip(self, clip, frames):
        self._clip = clip

    def _current(self, request: SegmentRequest) -> Clip:
        if self._clip is None or self._clip.clip_id != request.clip_id:
            raise RuntimeError(f"no ground truth bound for clip {request.clip_id!r}")
        return self._clip

    def generate(self, request):
        clip = self._current(request)
        return oracle_generate(
            clip.ground_truth,
            request.frame,
            request.cache_tokens,
            request.prompt,
            clip.sign_prompts,
            self.rule_keys,
        )


def visible_segments(sign_xy, frames: Sequence[SegmentFrame], k: int) -> list[int]:
    """Indices of the ``k`` frames whose rectangle centers lie nearest the sign."""
    centers = np.array([f.corners_world().mean(axis=0) for f in frames])
    dist = np.hypot(*(centers - np.asarray(sign_xy, dtype=float)[:2]).T)
    order = np.lexsort((np.arange(len(frames)), dist))
    return sorted(int(i) for i in order[:k])


class NoisyOracleModel(OracleModel):
    def __init__(self, noise: NoiseSpec = NoiseSpec(), seed: int = 0, rule_keys: Sequence[str] = DEFAULT_RULE_KEYS):
        super().__init__(seed, rule_keys)
        self.noise = noise
        self._visible: dict[int, set[str]] | None = None

    def begin_clip(self, clip, frames):
        super().begin_clip(clip, frames)
        k = self.noise.sign_visibility_segments
        if k is None:
            self._visible = None
            return
        always = {r.id for r in clip.ground_truth.rules if r.sign_position is None}
        self._visible = {i: set(always) for i in range(len(frames))}
        for rule in clip.ground_truth.rules:
            if rule.sign_position is not None:
                for i in visible_segments(rule.sign_position, frames, k):
                    self._visible[i].add(rule.id)

    def _rng(self, request: SegmentRequest) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(request.clip_id.encode()), request.segment_id])

    def generate(self, request):
        clip = self._current(request)
        visible = None if self._visible is None else self._visible.get(request.segment_id, set())
        return noisy_generate(
            clip.ground_truth,
            request.frame,
            request.cache_tokens,
            request.prompt,
            self.noise,
            self._rng(request),
            visible,
            clip.sign_prompts,
            self.rule_keys,
        )


# ---------------------------------------------------------------------------
# external process adapter


class AdapterModel(SegmentModel):
    """Runs a child process and exchanges one JSON line per segment.

    The child is started lazily and restarted after a timeout or crash; a
    failed request is never retried.
    """

    supports_images = True
    supports_prompt = True

    def __init__(self, command: Sequence[str], timeout: float = 60.0, seed: int = 0, env: dict | None = None):
        super().__init__(seed)
        if not command:
            raise ConfigError("adapter command is empty")
        self.command = list(command)
        self.timeout = timeout
        self.env = env
        self.last_model_info: dict = {}
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue | None = None

    def _start(self):
        env = dict(os.environ)
        if self.env:
            env.update(self.env)
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            env=env,
        )
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self._proc, self._lines), daemon=True).start()

    @staticmethod
    def _pump(proc: subprocess.Popen, lines: queue.Queue):
        for line in iter(proc.stdout.readline, b""):
            lines.put(line)
        lines.put(None)

    def _kill(self):
        proc, self._proc = self._proc, None
        if proc is None:
            return
        if proc.poll() is None:
            proc.kill()
        proc.wait()
        for stream in (proc.stdin, proc.stdout):
            try:
                stream.close()
            except OSError:
                pass

    def generate(self, request):
        self.last_model_info = {}
        if self._proc is None or self._proc.poll() is not None:
            self._kill()
            self._start()
        try:
            self._proc.stdin.write(encode_record(request.to_json()))
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self._kill()
            raise ProcessExit(f"adapter stdin closed: {exc}") from None
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self._kill()
            raise AdapterTimeout(f"no response within {self.timeout} s") from None
        if line is None:
            code = self._proc.wait()
            self._kill()
            raise ProcessExit(f"adapter exited with status {code}")
        try:
            text, info = decode_response(line, request.segment_id)
        except ProtocolViolation:
            self._kill()
            raise
        self.last_model_info = info
        return from_text(text)

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=2.0)
            except (OSError, subprocess.TimeoutExpired):
                pass
        self._kill()


def make_model(config) -> SegmentModel:
    """Build the backend named by a :class:`~rulemap.config.RunConfig`."""
    if config.backend == "oracle":
        return OracleModel(config.seed, config.rule_keys)
    if config.backend == "noisy":
        return NoisyOracleModel(config.noise, config.seed, config.rule_keys)
    if config.backend == "adapter":
        return AdapterModel(config.adapter_command, config.adapter_timeout, config.seed)
    raise ConfigError(f"unknown backend {config.backend!r}")
