"""Vector and rule evaluation: lane IoU matching, F_vec, rule matching, HMA."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import DEFAULT_HALF_WIDTH, DEFAULT_RESOLUTION, Extent, rasterize_lane
from .map_model import MapGraph, Rule

MATCH_THRESHOLD = 0.5


@dataclass
class MatchSet:
    pairs: list  # (pred lane id, gt lane id, iou)
    unmatched_pred: list
    unmatched_gt: list

    def pred_to_gt(self) -> dict[str, str]:
        return {p: g for p, g, _ in self.pairs}


def pairwise_iou(
    pred: MapGraph,
    gt: MapGraph,
    half_width: float = DEFAULT_HALF_WIDTH,
    resolution: float = DEFAULT_RESOLUTION,
) -> np.ndarray:
    """IoU of every (pred, gt) lane pair, rasterized over the union extent."""
    if not pred.lanes or not gt.lanes:
        return np.zeros((len(pred.lanes), len(gt.lanes)))
    lanes = list(pred.lanes) + list(gt.lanes)
    extent = Extent.around([l.xy for l in lanes], half_width + 2 * resolution, resolution)
    masks = [rasterize_lane(l.xy, half_width, resolution, extent).data for l in lanes]
    # per-mask bounding windows keep pairwise counting cheap
    boxes, counts = [], []
    for m in masks:
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        boxes.append((rows[0], rows[-1] + 1, cols[0], cols[-1] + 1) if len(rows) else None)
        counts.append(int(m.sum()))
    n = len(pred.lanes)
    out = np.zeros((n, len(gt.lanes)))
    for i in range(n):
        for j in range(len(gt.lanes)):
            a, b = boxes[i], boxes[n + j]
            if a is None or b is None:
                continue
            r0, r1 = max(a[0], b[0]), min(a[1], b[1])
            c0, c1 = max(a[2], b[2]), min(a[3], b[3])
            if r0 >= r1 or c0 >= c1:
                continue
            inter = int(np.count_nonzero(masks[i][r0:r1, c0:c1] & masks[n + j][r0:r1, c0:c1]))
            union = counts[i] + counts[n + j] - inter
            out[i, j] = inter / union if union else 0.0
    return out


def match_lanes(
    pred: MapGraph,
    gt: MapGraph,
    half_width: float = DEFAULT_HALF_WIDTH,
    resolution: float = DEFAULT_RESOLUTION,
    optimal: bool = False,
) -> MatchSet:
    """One-to-one lane matching on mask IoU; only pairs with IoU > 0.5 count.

    Greedy by descending IoU, ties broken by (gt id, pred id). With
    ``optimal=True`` a maximum-total-IoU assignment is used instead.
    """
    iou = pairwise_iou(pred, gt, half_width, resolution)
    pids = [l.id for l in pred.lanes]
    gids = [l.id for l in gt.lanes]
    pairs = []
    if optimal and iou.size:
        rows, cols = linear_sum_assignment(np.where(iou > MATCH_THRESHOLD, -iou, 0.0))
        pairs = [(pids[i], gids[j], float(iou[i, j])) for i, j in zip(rows, cols) if iou[i, j] > MATCH_THRESHOLD]
    else:
        cands = [
            (-iou[i, j], gids[j], pids[i], i, j)
            for i in range(len(pids))
            for j in range(len(gids))
            if iou[i, j] > MATCH_THRESHOLD
        ]
        used_p, used_g = set(), set()
        for neg, _, _, i, j in sorted(cands):
            if i in used_p or j in used_g:
                continue
            used_p.add(i)
            used_g.add(j)
            pairs.append((pids[i], gids[j], float(-neg)))
    matched_p = {p for p, _, _ in pairs}
    matched_g = {g for _, g, _ in pairs}
    return MatchSet(
        pairs,
        [p for p in pids if p not in matched_p],
        [g for g in gids if g not in matched_g],
    )


def f_vec(matches: MatchSet) -> float:
    """Mean IoU over matched pairs; 0 on a total miss, 1 when both sides are empty."""
    if matches.pairs:
        return float(np.mean([iou for _, _, iou in matches.pairs]))
    if not matches.unmatched_pred and not matches.unmatched_gt:
        return 1.0
    return 0.0


def match_rules(pred_rules: Sequence[Rule], gt_rules: Sequence[Rule]) -> dict[str, str]:
    """Pair predicted rules with ground-truth rules of identical key/value set.

    Each rule is used at most once; returns ``{pred id: gt id}``.
    """
    free: dict[frozenset, list[str]] = {}
    for r in sorted(gt_rules, key=lambda r: r.id):
        free.setdefault(r.kv_set, []).append(r.id)
    out = {}
    for r in sorted(pred_rules, key=lambda r: r.id):
        bucket = free.get(r.kv_set)
        if bucket:
            out[r.id] = bucket.pop(0)
    return out


def f1(p: float, r: float) -> float:
    """Harmonic mean of precision and recall (any common scale); 0 when both are 0."""
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class Counts:
    tp: int = 0
    n_pred: int = 0
    n_gt: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.n_pred + other.n_pred, self.n_gt + other.n_gt)

    def prf(self) -> tuple[float, float, float]:
        """Precision, recall and F1 in percent.

        An empty denominator gives 100 when the other side is empty as well
        (nothing to find, nothing claimed) and 0 otherwise.
        """
        if self.n_pred == 0 and self.n_gt == 0:
            return 100.0, 100.0, 100.0
        p = 100.0 * self.tp / self.n_pred if self.n_pred else 0.0
        r = 100.0 * self.tp / self.n_gt if self.n_gt else 0.0
        return p, r, f1(p, r)


def hma_counts(
    pred: MapGraph, gt: MapGraph, lane_matches: MatchSet, rule_matches: dict[str, str]
) -> tuple[Counts, list]:
    """Count association true positives.

    A predicted (rule, lane) pair is a true positive when its lane matched a
    ground-truth lane, its rule matched a ground-truth rule, and that
    ground-truth (rule, lane) pair is an association in the ground truth.
    """
    lane_map = lane_matches.pred_to_gt()
    gt_assoc = gt.associations
    detail = []
    tp = 0
    for rid, lid in sorted(pred.associations):
        g_lane = lane_map.get(lid)
        g_rule = rule_matches.get(rid)
        ok = g_lane is not None and g_rule is not None and (g_rule, g_lane) in gt_assoc
        tp += ok
        detail.append({"rule": rid, "lane": lid, "gt_rule": g_rule, "gt_lane": g_lane, "tp": bool(ok)})
    return Counts(tp, len(pred.associations), len(gt_assoc)), detail


def hma(pred: MapGraph, gt: MapGraph, lane_matches: MatchSet, rule_matches: dict[str, str]) -> tuple[float, float, float]:
    counts, _ = hma_counts(pred, gt, lane_matches, rule_matches)
    return counts.prf()


def eq2_discrepancy(p: float, r: float, f: float) -> float:
    """Gap between a reported F and F recomputed from P and R rounded to 2 decimals."""
    return abs(f - f1(round(p, 2), round(r, 2)))


@dataclass
class EvalReport:
    clip_id: str
    iou_sum: float
    n_matched: int
    n_pred_lanes: int
    n_gt_lanes: int
    rule: Counts
    assoc: Counts
    pairs: list = field(default_factory=list)
    associations: list = field(default_factory=list)

    @property
    def f_vec(self) -> float:
        if self.n_matched:
            return self.iou_sum / self.n_matched
        return 1.0 if self.n_pred_lanes == 0 and self.n_gt_lanes == 0 else 0.0

    @property
    def hma(self) -> tuple[float, float, float]:
        return self.assoc.prf()

    @property
    def rule_extract(self) -> tuple[float, float, float]:
        return self.rule.prf()

    def flags(self) -> list[str]:
        out = []
        for name, (p, r, f) in (("hma", self.hma), ("rule_extract", self.rule_extract)):
            if eq2_discrepancy(p, r, f) > 0.1:
                out.append(f"{name}: F differs from F(rounded P, R) by more than 0.1")
        return out

    def to_json(self, detail: bool = True) -> dict:
        p, r, f = self.hma
        rp, rr, rf = self.rule_extract
        out = {
            "clip_id": self.clip_id,
            "f_vec": self.f_vec,
            "lanes": {
                "matched": self.n_matched,
                "unmatched_pred": self.n_pred_lanes - self.n_matched,
                "unmatched_gt": self.n_gt_lanes - self.n_matched,
            },
            "rule_extract": {"precision": rp, "recall": rr, "f1": rf, "tp": self.rule.tp, "n_pred": self.rule.n_pred, "n_gt": self.rule.n_gt},
            "hma": {"precision": p, "recall": r, "f1": f, "tp": self.assoc.tp, "n_pred": self.assoc.n_pred, "n_gt": self.assoc.n_gt},
            "flags": self.flags(),
        }
        if detail:
            out["pairs"] = [{"pred": a, "gt": b, "iou": c} for a, b, c in self.pairs]
            out["associations"] = self.associations
        return out


def evaluate(
    pred: MapGraph,
    gt: MapGraph,
    clip_id: str = "",
    half_width: float = DEFAULT_HALF_WIDTH,
    resolution: float = DEFAULT_RESOLUTION,
    optimal: bool = False,
) -> EvalReport:
    lanes = match_lanes(pred, gt, half_width, resolution, optimal)
    rules = match_rules(pred.rules, gt.rules)
    assoc, detail = hma_counts(pred, gt, lanes, rules)
    return EvalReport(
        clip_id,
        sum(iou for _, _, iou in lanes.pairs),
        len(lanes.pairs),
        len(pred.lanes),
        len(gt.lanes),
        Counts(len(rules), len(pred.rules), len(gt.rules)),
        assoc,
        lanes.pairs,
        detail,
    )


def aggregate(reports: Iterable[EvalReport], clip_id: str = "ALL") -> EvalReport:
    """Micro-average: pool IoUs and TP/prediction/ground-truth counts over clips."""
    out = EvalReport(clip_id, 0.0, 0, 0, 0, Counts(), Counts())
    for r in reports:
        out.iou_sum += r.iou_sum
        out.n_matched += r.n_matched
        out.n_pred_lanes += r.n_pred_lanes
        out.n_gt_lanes += r.n_gt_lanes
        out.rule = out.rule + r.rule
        out.assoc = out.assoc + r.assoc
    return out


def format_table(reports: Sequence[EvalReport], total: EvalReport | None = None) -> str:
    """Fixed-width text table, one row per clip plus the pooled row."""
    header = f"{'clip':<28} {'F_vec':>6} {'RuleP':>7} {'RuleR':>7} {'RuleF':>7} {'HMA-P':>7} {'HMA-R':>7} {'HMA-F':>7}"
    lines = ["# rule extract counts one unit per rule (exact key/value set match)", header, "-" * len(header)]
    rows = list(reports) + ([total] if total is not None else [])
    for r in rows:
        if r is total:
            lines.append("-" * len(header))
        rp, rr, rf = r.rule_extract
        p, rc, f = r.hma
        lines.append(f"{r.clip_id:<28} {r.f_vec:>6.3f} {rp:>7.2f} {rr:>7.2f} {rf:>7.2f} {p:>7.2f} {rc:>7.2f} {f:>7.2f}")
        for flag in r.flags():
            lines.append(f"  ! {flag}")
    return "\n".join(lines)


def segment_reports(run, gt: MapGraph, half_width: float = DEFAULT_HALF_WIDTH, resolution: float = DEFAULT_RESOLUTION) -> list[EvalReport]:
    """Score each segment's raw output against ground truth sliced to that segment.

    Works in segment-local coordinates, before stitching merges rules
    across segments.
    """
    from .geometry import slice_graph

    out = []
    for seg, frame in zip(run.segments, run.plan.frames):
        local_gt = slice_graph(gt, frame)
        out.append(evaluate(seg.graph, local_gt, f"{run.clip_id}#{seg.index}", half_width, resolution))
    return out
