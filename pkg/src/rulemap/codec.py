"""Lane/rule token codec and the deterministic output parser.

Output grammar::

    sequence   := (lane_block)* EOS
    lane_block := LANE coord+ LANE_END rule_part
    coord      := COORD_U COORD_V
    rule_part  := NONE | (RULE kv+ RULE_END)+
    kv         := RULE_KEY RULE_VALUE

Every token has a canonical space-free text form; a sequence renders as
those forms joined by single spaces, e.g.
``[lane] u112 v40 u112 v200 [/lane] [rule] k:rule_type v:bus_lane [/rule] [eos]``.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence
from urllib.parse import quote, unquote

import numpy as np

from .errors import MalformedSequence, UnknownRuleKey
from .geometry import (
    DEFAULT_ANGLE_BINS,
    SegmentFrame,
    dequantize_points,
    pose_to_segment,
    quantize_points,
    quantize_pose,
)
from .map_model import DEFAULT_RULE_KEYS, Lane, LaneKind, MapGraph, Pose, Rule, build_graph, rules_by_lane

log = logging.getLogger(__name__)


class T(str, enum.Enum):
    LANE = "LaneStart"
    LANE_END = "LaneEnd"
    RULE = "RuleStart"
    RULE_END = "RuleEnd"
    NONE = "NoneRule"
    COORD_U = "CoordU"
    COORD_V = "CoordV"
    POSE_U = "PoseU"
    POSE_V = "PoseV"
    POSE_THETA = "PoseTheta"
    RULE_KEY = "RuleKey"
    RULE_VALUE = "RuleValue"
    PROMPT_COORD = "PromptCoord"
    IMAGE = "Image"
    EOS = "EndOfSequence"
    UNKNOWN = "Unknown"


_FIXED_TEXT = {
    T.LANE: "[lane]",
    T.LANE_END: "[/lane]",
    T.RULE: "[rule]",
    T.RULE_END: "[/rule]",
    T.NONE: "[None]",
    T.EOS: "[eos]",
}
_TEXT_FIXED = {v: k for k, v in _FIXED_TEXT.items()}
_INT_PREFIX = {T.COORD_U: "u", T.COORD_V: "v", T.POSE_U: "pu", T.POSE_V: "pv", T.POSE_THETA: "pa"}
_VALUE_SAFE = ":-_./,+()@#&=*'!~"


@dataclass(frozen=True)
class Token:
    kind: T
    value: int | str | tuple[int, int] | None = None

    @property
    def text(self) -> str:
        k = self.kind
        if k in _FIXED_TEXT:
            return _FIXED_TEXT[k]
        if k in _INT_PREFIX:
            return f"{_INT_PREFIX[k]}{self.value}"
        if k is T.RULE_KEY:
            return f"k:{self.value}"
        if k is T.RULE_VALUE:
            return f"v:{quote(str(self.value), safe=_VALUE_SAFE)}"
        if k is T.PROMPT_COORD:
            u, v = self.value
            return f"[COORD]{u},{v}"
        if k is T.IMAGE:
            return f"[img{self.value}]"
        return str(self.value)

    def __repr__(self) -> str:
        return self.text


LANE_START = Token(T.LANE)
LANE_END = Token(T.LANE_END)
RULE_START = Token(T.RULE)
RULE_END = Token(T.RULE_END)
NONE_RULE = Token(T.NONE)
EOS = Token(T.EOS)

TokenSequence = list  # list[Token]; kept as a plain list for slicing/concatenation

_INT_RE = re.compile(r"^(pu|pv|pa|u|v)(\d+)$")
_IMG_RE = re.compile(r"^\[img(\d+)\]$")
_COORD_RE = re.compile(r"^\[COORD\](\d+),(\d+)$")
_PREFIX_KIND = {v: k for k, v in _INT_PREFIX.items()}


def token_from_text(text: str) -> Token:
    """Parse one token's text form; unrecognized text becomes an UNKNOWN token."""
    if text in _TEXT_FIXED:
        return Token(_TEXT_FIXED[text])
    m = _INT_RE.match(text)
    if m:
        return Token(_PREFIX_KIND[m.group(1)], int(m.group(2)))
    if text.startswith("k:") and len(text) > 2:
        return Token(T.RULE_KEY, text[2:])
    if text.startswith("v:"):
        return Token(T.RULE_VALUE, unquote(text[2:]))
    m = _IMG_RE.match(text)
    if m:
        return Token(T.IMAGE, int(m.group(1)))
    m = _COORD_RE.match(text)
    if m:
        return Token(T.PROMPT_COORD, (int(m.group(1)), int(m.group(2))))
    return Token(T.UNKNOWN, text)


def to_text(tokens: Iterable[Token]) -> str:
    return " ".join(t.text for t in tokens)


def from_text(text: str) -> list[Token]:
    return [token_from_text(piece) for piece in text.split()]


@dataclass(frozen=True)
class Prompt:
    """Sign prompt. Only ``coord`` produces tokens; ``bbox``/``roi_path`` are
    carried opaquely for external models."""

    coord: tuple[int, int] | None = None
    bbox: tuple[float, ...] | None = None
    roi_path: str | None = None

    def to_json(self) -> dict:
        out = {}
        if self.coord is not None:
            out["coord"] = list(self.coord)
        if self.bbox is not None:
            out["bbox"] = list(self.bbox)
        if self.roi_path is not None:
            out["roi_path"] = self.roi_path
        return out

    @classmethod
    def from_json(cls, obj: dict | None) -> "Prompt | None":
        if not obj:
            return None
        coord = obj.get("coord")
        bbox = obj.get("bbox")
        return cls(
            coord=tuple(int(c) for c in coord) if coord is not None else None,
            bbox=tuple(bbox) if bbox is not None else None,
            roi_path=obj.get("roi_path"),
        )


# ---------------------------------------------------------------------------
# serialization


def _dedupe(uv: np.ndarray) -> np.ndarray:
    if len(uv) == 0:
        return uv
    keep = np.concatenate([[True], np.any(np.diff(uv, axis=0) != 0, axis=1)])
    return uv[keep]


def serialize_segment(
    graph: MapGraph, frame: SegmentFrame, rule_keys: Sequence[str] = DEFAULT_RULE_KEYS
) -> list[Token]:
    """Encode a segment-local graph; lanes come out in canonical order.

    Canonical order is by first quantized point (u, then v), then the
    remaining coordinates, then the rule payloads.
    """
    allowed = set(rule_keys)
    lane_rules = rules_by_lane(graph)
    blocks = []
    for lane in graph.lanes:
        uv = _dedupe(quantize_points(frame, lane.xy))
        rules = lane_rules.get(lane.id, [])
        for rule in rules:
            for key in rule.keys:
                if key not in allowed:
                    raise UnknownRuleKey(key)
        if len(uv) < 2:
            log.warning("lane %s collapses to a single bin and is not emitted", lane.id)
            continue
        coords = tuple(map(tuple, uv.tolist()))
        blocks.append((coords, tuple(r.canonical() for r in rules), rules))
    blocks.sort(key=lambda b: (b[0][0], b[0], b[1]))

    out: list[Token] = []
    for coords, _, rules in blocks:
        out.append(LANE_START)
        for u, v in coords:
            out.append(Token(T.COORD_U, int(u)))
            out.append(Token(T.COORD_V, int(v)))
        out.append(LANE_END)
        if not rules:
            out.append(NONE_RULE)
        for rule in rules:
            out.append(RULE_START)
            for k, v in rule.kv:
                out.append(Token(T.RULE_KEY, k))
                out.append(Token(T.RULE_VALUE, v))
            out.append(RULE_END)
    out.append(EOS)
    return out


def strip_eos(tokens: Sequence[Token]) -> list[Token]:
    tokens = list(tokens)
    while tokens and tokens[-1].kind is T.EOS:
        tokens.pop()
    return tokens


def serialize_input(
    poses: Sequence[Pose],
    frame: SegmentFrame,
    image_refs: Sequence = (),
    cache: Sequence[Token] = (),
    prompt: Prompt | None = None,
    angle_bins: int = DEFAULT_ANGLE_BINS,
) -> list[Token]:
    """Interleave image markers and pose tokens, then the cache and prompt.

    ``poses`` are world poses; each becomes ``[img i] pu pv pa`` in the
    frame. Image content is never encoded, only its position in the stream.
    """
    if image_refs and len(image_refs) != len(poses):
        raise ValueError("image_refs must be empty or one per pose")
    out: list[Token] = []
    for i, pose in enumerate(poses):
        u, v, a = quantize_pose(frame, pose_to_segment(frame, pose), angle_bins)
        out += [Token(T.IMAGE, i), Token(T.POSE_U, u), Token(T.POSE_V, v), Token(T.POSE_THETA, a)]
    out += strip_eos(cache)
    if prompt is not None and prompt.coord is not None:
        out.append(Token(T.PROMPT_COORD, tuple(prompt.coord)))
    out.append(EOS)
    return out


# ---------------------------------------------------------------------------
# parsing


@dataclass(frozen=True)
class Diagnostic:
    index: int
    expected: tuple[str, ...]
    found: str | None
    message: str

    @classmethod
    def from_error(cls, err: MalformedSequence) -> "Diagnostic":
        return cls(err.index, err.expected, err.found, str(err))


class ParseResult(NamedTuple):
    graph: MapGraph
    diagnostics: list


@dataclass
class _RawBlock:
    start: int
    coords: list = field(default_factory=list)
    rules: list = field(default_factory=list)


class _Parser:
    def __init__(self, tokens: Sequence[Token], frame: SegmentFrame, rule_keys: Sequence[str]):
        self.tokens = list(tokens)
        self.frame = frame
        self.keys = set(rule_keys)

    def fail(self, i: int, expected: Iterable[T], message: str | None = None):
        found = self.tokens[i].text if i < len(self.tokens) else None
        names = [e.value for e in expected]
        if message is not None:
            message = f"at token {i}: {message}"
        raise MalformedSequence(i, names, found, message)

    def kind(self, i: int) -> T | None:
        return self.tokens[i].kind if i < len(self.tokens) else None

    def coord(self, i: int, kind: T, limit: int) -> int:
        tok = self.tokens[i] if i < len(self.tokens) else None
        if tok is None or tok.kind is not kind:
            self.fail(i, [kind])
        if not isinstance(tok.value, int) or not 0 <= tok.value < limit:
            self.fail(i, [kind], f"{tok.text} outside [0, {limit})")
        return tok.value

    def lane_block(self, i: int) -> tuple[_RawBlock, int]:
        block = _RawBlock(start=i)
        i += 1
        while True:
            k = self.kind(i)
            if k is T.COORD_U:
                u = self.coord(i, T.COORD_U, self.frame.width_bins)
                v = self.coord(i + 1, T.COORD_V, self.frame.height_bins)
                block.coords.append((u, v))
                i += 2
            elif k is T.LANE_END and block.coords:
                distinct = _dedupe(np.array(block.coords))
                if len(distinct) < 2:
                    self.fail(i, [T.COORD_U], "lane needs at least two distinct points")
                i += 1
                break
            else:
                self.fail(i, [T.COORD_U, T.LANE_END] if block.coords else [T.COORD_U])

        k = self.kind(i)
        if k is T.NONE:
            return block, i + 1
        if k is not T.RULE:
            self.fail(i, [T.NONE, T.RULE])
        while self.kind(i) is T.RULE:
            i += 1
            kv = []
            while self.kind(i) is T.RULE_KEY:
                key = self.tokens[i].value
                if not isinstance(key, str) or key not in self.keys:
                    self.fail(i, [T.RULE_KEY], f"key {key!r} not in rule vocabulary")
                if any(key == k0 for k0, _ in kv):
                    self.fail(i, [T.RULE_KEY, T.RULE_END], f"duplicate key {key!r}")
                if self.kind(i + 1) is not T.RULE_VALUE:
                    self.fail(i + 1, [T.RULE_VALUE])
                kv.append((key, str(self.tokens[i + 1].value)))
                i += 2
            if self.kind(i) is not T.RULE_END or not kv:
                self.fail(i, [T.RULE_KEY, T.RULE_END] if kv else [T.RULE_KEY])
            block.rules.append(tuple(kv))
            i += 1
        return block, i

    def next_resume(self, err_index: int, block_start: int) -> int:
        j = max(err_index, block_start + 1)
        while j < len(self.tokens) and self.tokens[j].kind not in (T.LANE, T.EOS):
            j += 1
        return j

    def segment(self, recover: bool) -> tuple[list[_RawBlock], list[Diagnostic]]:
        blocks: list[_RawBlock] = []
        diags: list[Diagnostic] = []
        n = len(self.tokens)
        i = 0
        while True:
            try:
                if i >= n:
                    self.fail(i, [T.LANE, T.EOS])
                k = self.kind(i)
                if k is T.EOS:
                    if i != n - 1:
                        self.fail(i + 1, [], "tokens after end of sequence")
                    break
                if k is not T.LANE:
                    self.fail(i, [T.LANE, T.EOS])
                block, i = self.lane_block(i)
                blocks.append(block)
            except MalformedSequence as err:
                if not recover:
                    raise
                diags.append(Diagnostic.from_error(err))
                if err.index >= n or self.kind(i) is T.EOS:
                    break
                i = self.next_resume(err.index, i)
        return blocks, diags


def parse(
    tokens: Sequence[Token],
    frame: SegmentFrame,
    *,
    recover: bool = False,
    rule_keys: Sequence[str] = DEFAULT_RULE_KEYS,
) -> ParseResult:
    """Rebuild a segment-local graph from output tokens.

    Works in three passes: split the stream into lane blocks by delimiter,
    dequantize each block's coordinates, then attach rules to lanes. In
    strict mode the first grammar violation raises
    :class:`MalformedSequence`; with ``recover=True`` the offending block is
    dropped, a diagnostic is recorded and parsing resumes at the next
    ``[lane]``.
    """
    parser = _Parser(tokens, frame, rule_keys)
    blocks, diags = parser.segment(recover)

    lanes = []
    lane_rules: dict[str, list[Rule]] = {}
    for n, block in enumerate(blocks):
        uv = _dedupe(np.array(block.coords, dtype=int))
        pts = dequantize_points(frame, uv)
        lane = Lane(f"l{n}", LaneKind.DIVIDER, tuple(map(tuple, pts.tolist())))
        lanes.append(lane)
        lane_rules[lane.id] = [Rule("", kv) for kv in block.rules]
    return ParseResult(build_graph(lanes, lane_rules), diags)


# ---------------------------------------------------------------------------
# integer vocabulary


class Vocabulary:
    """Integer ids for output-grammar tokens.

    Coordinates and keys get fixed ids; rule values are interned on first
    use, so a table built in one run must be reused to decode that run.
    """

    _SPECIALS = (T.LANE, T.LANE_END, T.RULE, T.RULE_END, T.NONE, T.EOS)

    def __init__(self, width_bins: int = 224, height_bins: int = 224, rule_keys: Sequence[str] = DEFAULT_RULE_KEYS):
        self.width_bins = width_bins
        self.height_bins = height_bins
        self.rule_keys = tuple(rule_keys)
        self._u0 = len(self._SPECIALS)
        self._v0 = self._u0 + width_bins
        self._k0 = self._v0 + height_bins
        self._val0 = self._k0 + len(self.rule_keys)
        self._values: list[str] = []
        self._value_ids: dict[str, int] = {}

    def __len__(self) -> int:
        return self._val0 + len(self._values)

    def intern(self, value: str) -> int:
        if value not in self._value_ids:
            self._value_ids[value] = len(self._values)
            self._values.append(value)
        return self._val0 + self._value_ids[value]

    def encode(self, tokens: Iterable[Token]) -> list[int]:
        ids = []
        for tok in tokens:
            if tok.kind in self._SPECIALS:
                ids.append(self._SPECIALS.index(tok.kind))
            elif tok.kind is T.COORD_U and 0 <= tok.value < self.width_bins:
                ids.append(self._u0 + tok.value)
            elif tok.kind is T.COORD_V and 0 <= tok.value < self.height_bins:
                ids.append(self._v0 + tok.value)
            elif tok.kind is T.RULE_KEY and tok.value in self.rule_keys:
                ids.append(self._k0 + self.rule_keys.index(tok.value))
            elif tok.kind is T.RULE_VALUE:
                ids.append(self.intern(tok.value))
            else:
                raise ValueError(f"token {tok.text} has no id in this vocabulary")
        return ids

    def decode(self, ids: Iterable[int]) -> list[Token]:
        out = []
        for i in ids:
            if 0 <= i < self._u0:
                out.append(Token(self._SPECIALS[i]))
            elif i < self._v0:
                out.append(Token(T.COORD_U, i - self._u0))
            elif i < self._k0:
                out.append(Token(T.COORD_V, i - self._v0))
            elif i < self._val0:
                out.append(Token(T.RULE_KEY, self.rule_keys[i - self._k0]))
            elif i < len(self):
                out.append(Token(T.RULE_VALUE, self._values[i - self._val0]))
            else:
                raise ValueError(f"id {i} outside vocabulary of size {len(self)}")
        return out
