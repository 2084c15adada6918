"""Interval geometry, prediction/ground-truth matching, cross-modal fusion,
and the AP/AR evaluation protocol.

Metrics come in two routes: a fast path used by the pipeline and a
brute-force oracle (explicit per-prefix PR construction, exhaustive
assignment enumeration) used to validate it.  Both paths share only the
elementary IoU definition.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment


class MetricError(ValueError):
    pass


AR_TIOU_GRID = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class EventCandidate:
    """Decoded localization unit: normalized start/duration plus confidence."""

    start: float
    dur: float
    conf: float
    modality: str = "a"

    def bounds(self) -> tuple[float, float]:
        return self.start, self.start + self.dur


def clip_value(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def to_absolute(start: float, dur: float, length: int, dt: float) -> tuple[float, float]:
    """Map a normalized (start, duration) onto the clip's absolute timeline.

    Both endpoints are clipped into [0, L*dt]; out-of-range inputs therefore
    collapse onto the boundary rather than escaping the clip.
    """
    if length < 1 or dt <= 0:
        raise MetricError("time-mapping: need length >= 1 and dt > 0")
    horizon = length * dt
    t_st = clip_value(start * horizon, 0.0, horizon)
    t_ed = clip_value((start + dur) * horizon, 0.0, horizon)
    if t_ed < t_st:  # only possible for dur < 0 inputs
        t_ed = t_st
    return t_st, t_ed


def iou_1d(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Intersection over union of two [start, end] intervals."""
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0.0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def eiou(p: tuple[float, float], g: tuple[float, float]) -> float:
    """IoU penalized by normalized squared center and length gaps.

    Both penalties are normalized by the smallest enclosing interval, so the
    score is at most the IoU and equals it only when both gaps vanish.
    """
    enclose = max(p[1], g[1]) - min(p[0], g[0])
    if enclose <= 0.0:
        return iou_1d(p, g)
    dc = (p[0] + p[1]) / 2.0 - (g[0] + g[1]) / 2.0
    dl = (p[1] - p[0]) - (g[1] - g[0])
    return iou_1d(p, g) - (dc / enclose) ** 2 - (dl / enclose) ** 2


# ---------------------------------------------------------------------------
# matching

_FORBIDDEN = 1.0e6


def match_events(preds: list[tuple[float, float]], gts: list[tuple[float, float]],
                 iou_floor: float = 0.1) -> tuple[list[tuple[int, int]], list[int]]:
    """One-to-one assignment of predictions to ground truths.

    Maximizes matched-pair count, then minimizes the summed (1 - IoU) over
    pairs, restricted to pairs with IoU >= iou_floor.  Returns the matched
    (pred_idx, gt_idx) pairs and the unmatched prediction indices.
    """
    n_p, n_g = len(preds), len(gts)
    if n_p == 0 or n_g == 0:
        return [], list(range(n_p))
    size = max(n_p, n_g)
    cost = np.full((size, size), _FORBIDDEN)
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            v = iou_1d(p, g)
            if v >= iou_floor:
                cost[i, j] = 1.0 - v
    rows, cols = linear_sum_assignment(cost)
    matched = [(int(i), int(j)) for i, j in zip(rows, cols)
               if i < n_p and j < n_g and cost[i, j] < _FORBIDDEN / 2]
    matched_preds = {i for i, _ in matched}
    unmatched = [i for i in range(n_p) if i not in matched_preds]
    return matched, unmatched


def match_cost(preds, gts, pairs) -> float:
    return math.fsum(1.0 - iou_1d(preds[i], gts[j]) for i, j in pairs)


def match_events_bruteforce(preds, gts, iou_floor: float = 0.1):
    """Exhaustive search over all partial one-to-one matchings (small inputs).

    Lexicographic objective: maximize cardinality, then minimize summed
    (1 - IoU).  Used as the oracle for ``match_events``.
    """
    n_p, n_g = len(preds), len(gts)
    feasible = {(i, j) for i in range(n_p) for j in range(n_g)
                if iou_1d(preds[i], gts[j]) >= iou_floor}
    best: tuple[int, float, list] = (0, 0.0, [])
    order = min(n_p, n_g)
    for k in range(order, -1, -1):
        found = False
        for p_sub in itertools.combinations(range(n_p), k):
            for g_perm in itertools.permutations(range(n_g), k):
                pairs = list(zip(p_sub, g_perm))
                if any(pair not in feasible for pair in pairs):
                    continue
                cost = match_cost(preds, gts, pairs)
                if not found or cost < best[1]:
                    best = (k, cost, pairs)
                    found = True
        if found:
            break
    pairs = best[2]
    matched_preds = {i for i, _ in pairs}
    return pairs, [i for i in range(n_p) if i not in matched_preds]


# ---------------------------------------------------------------------------
# cross-modal fusion


def nms_fuse(events_a: list[EventCandidate], events_v: list[EventCandidate],
             iou_thr: float = 0.75) -> list[EventCandidate]:
    """Union both modality lists, sort by confidence, greedily suppress
    events overlapping a kept one above the threshold."""
    if not 0.0 < iou_thr <= 1.0:
        raise MetricError("fusion-threshold: iou_thr must lie in (0, 1]")
    pool = list(events_a) + list(events_v)
    order = sorted(range(len(pool)), key=lambda i: (-pool[i].conf, i))
    kept: list[EventCandidate] = []
    for i in order:
        ev = pool[i]
        if any(iou_1d(ev.bounds(), other.bounds()) > iou_thr for other in kept):
            continue
        kept.append(ev)
    return kept


# ---------------------------------------------------------------------------
# AP / AR protocol
#
# Predictions are given per clip as (start, end, confidence); ground truths
# per clip as (start, end).  AP uses global confidence-sorted greedy matching
# with one-to-one gt consumption; AR uses the per-gt best-IoU convention over
# the tIoU grid {0.50, 0.55, ..., 0.95} with a per-clip top-n proposal cap.


def _check_has_gt(gts_per_clip) -> int:
    total = sum(len(g) for g in gts_per_clip)
    if total == 0:
        raise MetricError("ap-undefined: no ground truth in the evaluation set")
    return total


def _sorted_global_preds(preds_per_clip):
    flat = [(p[2], ci, pi, p) for ci, preds in enumerate(preds_per_clip)
            for pi, p in enumerate(preds)]
    flat.sort(key=lambda rec: (-rec[0], rec[1], rec[2]))
    return flat


def _greedy_tp_flags(flat, gts_per_clip, iou_thr):
    """TP/FP flag per prediction in global confidence order."""
    taken = [np.zeros(len(g), dtype=bool) for g in gts_per_clip]
    flags = []
    for _, ci, _, pred in flat:
        gts = gts_per_clip[ci]
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts):
            if taken[ci][j]:
                continue
            v = iou_1d((pred[0], pred[1]), g)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thr:
            taken[ci][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _ap_from_points(points: list[tuple[float, float]], n_gt: int) -> float:
    """All-point interpolated area under the PR points (recall, precision)."""
    del n_gt
    area_terms = []
    prev_recall = 0.0
    for i, (recall, _) in enumerate(points):
        if recall > prev_recall:
            envelope = max(p for _, p in points[i:])
            area_terms.append((recall - prev_recall) * envelope)
            prev_recall = recall
    return math.fsum(area_terms)


def average_precision(preds_per_clip, gts_per_clip, iou_thr: float) -> float:
    """AP at one temporal-IoU threshold over a whole evaluation set."""
    n_gt = _check_has_gt(gts_per_clip)
    flat = _sorted_global_preds(preds_per_clip)
    if not flat:
        return 0.0
    flags = _greedy_tp_flags(flat, gts_per_clip, iou_thr)
    points = []
    tp = 0
    for k, flag in enumerate(flags, start=1):
        tp += int(flag)
        points.append((tp / n_gt, tp / k))
    return _ap_from_points(points, n_gt)


def average_precision_bruteforce(preds_per_clip, gts_per_clip, iou_thr: float) -> float:
    """Oracle AP: rebuild the PR point for every confidence prefix from
    scratch, then integrate point by point."""
    n_gt = _check_has_gt(gts_per_clip)
    flat = _sorted_global_preds(preds_per_clip)
    if not flat:
        return 0.0
    points = []
    for k in range(1, len(flat) + 1):
        flags = _greedy_tp_flags(flat[:k], gts_per_clip, iou_thr)
        tp = sum(flags)
        points.append((tp / n_gt, tp / k))
    return _ap_from_points(points, n_gt)


def _topn(preds, n):
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][2], i))
    return [preds[i] for i in order[:n]]


def average_recall(preds_per_clip, gts_per_clip, n: int) -> float:
    """AR@n: per-gt best IoU against the clip's top-n proposals, thresholded
    over the tIoU grid, averaged over thresholds then clips."""
    if n < 1:
        raise MetricError("ar-budget: n must be >= 1")
    _check_has_gt(gts_per_clip)
    per_clip = []
    for preds, gts in zip(preds_per_clip, gts_per_clip):
        if not gts:
            continue
        top = _topn(preds, n)
        best = [max((iou_1d((p[0], p[1]), g) for p in top), default=0.0) for g in gts]
        recalls = [sum(1 for b in best if b >= t) / len(gts) for t in AR_TIOU_GRID]
        per_clip.append(math.fsum(recalls) / len(AR_TIOU_GRID))
    return math.fsum(per_clip) / len(per_clip)


def average_recall_bruteforce(preds_per_clip, gts_per_clip, n: int) -> float:
    """Oracle AR: explicit double loop per threshold and per gt."""
    if n < 1:
        raise MetricError("ar-budget: n must be >= 1")
    _check_has_gt(gts_per_clip)
    clip_values = []
    for preds, gts in zip(preds_per_clip, gts_per_clip):
        if not gts:
            continue
        top = _topn(preds, n)
        acc = []
        for t in AR_TIOU_GRID:
            hit = 0
            for g in gts:
                recalled = False
                for p in top:
                    if iou_1d((p[0], p[1]), g) >= t:
                        recalled = True
                if recalled:
                    hit += 1
            acc.append(hit / len(gts))
        clip_values.append(math.fsum(acc) / len(AR_TIOU_GRID))
    return math.fsum(clip_values) / len(clip_values)


@dataclass
class MetricReport:
    ap: dict[float, float] = field(default_factory=dict)
    ar: dict[int, float] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["metric,threshold_or_n,value"]
        for thr in sorted(self.ap):
            lines.append(f"AP,{thr},{self.ap[thr]:.6f}")
        for n in sorted(self.ar):
            lines.append(f"AR,{n},{self.ar[n]:.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "ap": {str(k): v for k, v in self.ap.items()},
            "ar": {str(k): v for k, v in self.ar.items()},
            "diagnostics": self.diagnostics,
        }, indent=2)


def compute_report(preds_per_clip, gts_per_clip, thresholds, budgets) -> MetricReport:
    report = MetricReport()
    for thr in thresholds:
        report.ap[thr] = average_precision(preds_per_clip, gts_per_clip, thr)
    for n in budgets:
        report.ar[n] = average_recall(preds_per_clip, gts_per_clip, n)
    return report


# ---------------------------------------------------------------------------
# prediction interchange: JSON lines, one object per clip


def write_predictions_jsonl(path: str, clips: list[tuple[int, list[EventCandidate]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for clip_id, events in clips:
            fh.write(json.dumps({
                "clip_id": clip_id,
                "events": [{"s": e.start, "l": e.dur, "pi": e.conf, "modality": e.modality}
                           for e in events],
            }) + "\n")


def read_predictions_jsonl(path: str) -> list[tuple[int, list[EventCandidate]]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            events = [EventCandidate(e["s"], e["l"], e["pi"], e.get("modality", "a"))
                      for e in rec["events"]]
            out.append((int(rec["clip_id"]), events))
    return out
