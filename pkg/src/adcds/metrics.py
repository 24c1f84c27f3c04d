"""Evaluation engine: IoU, greedy matching, COCO-style AP/mAP, manual
precision/recall metrics and a stage timing harness.

AP is the 101-point interpolated average precision used by COCO. Recall
levels are compared exactly in integer arithmetic (``100 * tp >= i * npos``)
and the final average is summed in rationals, so the fast path and the
brute-force oracle below agree bit for bit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import BBox, DefectClass, DefectInstance, InstanceMask, classes_for
from .errors import ShapeError, UndefinedMetricError

IOU_RANGE = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = 101


def iou_box(a: BBox, b: BBox) -> float:
    inter = a.intersection_area(b)
    return inter / (a.area + b.area - inter)


def _run_intersection(a: InstanceMask, b: InstanceMask) -> int:
    sa, ea = a.starts.tolist(), (a.starts + a.lengths).tolist()
    sb, eb = b.starts.tolist(), (b.starts + b.lengths).tolist()
    i = j = inter = 0
    while i < len(sa) and j < len(sb):
        lo, hi = max(sa[i], sb[j]), min(ea[i], eb[j])
        if hi > lo:
            inter += hi - lo
        if ea[i] < eb[j]:
            i += 1
        else:
            j += 1
    return inter


def iou_mask(a: InstanceMask, b: InstanceMask) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    na, nb = a.area, b.area
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    inter = _run_intersection(a, b)
    return inter / (na + nb - inter)


def _iou(p: DefectInstance, g: DefectInstance, mode: str) -> float:
    if mode == "box":
        return iou_box(p.bbox, g.bbox)
    if p.mask is None or g.mask is None:
        raise ValueError("mask-mode evaluation needs masks on every instance")
    if not p.bbox.intersection_area(g.bbox) and p.mask.area and g.mask.area:
        return 0.0
    return iou_mask(p.mask, g.mask)


@dataclass(frozen=True)
class MatchResult:
    """Greedy matching outcome; per-detection lists follow input order."""

    is_tp: tuple[bool, ...]
    matched_gt: tuple[int | None, ...]
    unmatched_gt: tuple[int, ...]
    iou_threshold: float

    @property
    def tp(self) -> int:
        return sum(self.is_tp)

    @property
    def fp(self) -> int:
        return len(self.is_tp) - self.tp

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)


def _confidence_order(preds: Sequence[DefectInstance]) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: -preds[i].confidence)


def match_detections(preds: Sequence[DefectInstance],
                     gts: Sequence[DefectInstance], iou_thresh: float,
                     mode: str = "box") -> MatchResult:
    """Greedy by descending confidence (ties: input order). Each prediction
    takes the unmatched same-class ground truth with the highest IoU, if
    that IoU is at least ``iou_thresh``."""
    if mode not in ("box", "mask"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "mask" and any(x.mask is None for x in (*preds, *gts)):
        raise ValueError("mask-mode matching needs masks on every instance")
    for p in preds:
        if p.confidence is None:
            raise ValueError("predictions must carry a confidence")
    taken = [False] * len(gts)
    is_tp = [False] * len(preds)
    matched: list[int | None] = [None] * len(preds)
    for i in _confidence_order(preds):
        p = preds[i]
        best, best_j = -1.0, None
        for j, g in enumerate(gts):
            if taken[j] or g.defect_class != p.defect_class:
                continue
            v = _iou(p, g, mode)
            if v >= iou_thresh and v > best:
                best, best_j = v, j
        if best_j is not None:
            taken[best_j] = True
            is_tp[i] = True
            matched[i] = best_j
    return MatchResult(tuple(is_tp), tuple(matched),
                       tuple(j for j, t in enumerate(taken) if not t),
                       iou_thresh)


# ------------------------------------------------------------ PR curves

def _by_class(items: Iterable[DefectInstance], cls: DefectClass):
    return [x for x in items if x.defect_class == cls]


def pr_records(preds: Mapping[str, Sequence[DefectInstance]],
               gts: Mapping[str, Sequence[DefectInstance]],
               cls: DefectClass, iou_thresh: float, mode: str = "box"):
    """Ranked (confidence, is_tp) list for one class plus the positive count.

    Detections from all images are merged by (confidence desc, image id,
    input index) so the result does not depend on evaluation order.
    """
    recs = []
    npos = 0
    for image_id in sorted(set(preds) | set(gts)):
        g = _by_class(gts.get(image_id, ()), cls)
        p = _by_class(preds.get(image_id, ()), cls)
        npos += len(g)
        if not p:
            continue
        m = match_detections(p, g, iou_thresh, mode)
        for k, (inst, tp) in enumerate(zip(p, m.is_tp)):
            recs.append((-inst.confidence, image_id, k, tp))
    recs.sort(key=lambda r: (r[0], r[1], r[2]))
    return [(-r[0], r[3]) for r in recs], npos


def _interpolated_points(tp_flags, npos):
    """Indices into the ranked list giving interpolated precision at each of
    the 101 recall levels (None where the level is never reached)."""
    flags = np.asarray(tp_flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    prec = tp / np.maximum(tp + fp, 1)
    n = len(flags)
    # suffix argmax of precision: best index at or after k
    best = np.empty(n, dtype=np.int64)
    cur = n - 1
    for k in range(n - 1, -1, -1):
        if prec[k] > prec[cur]:
            cur = k
        best[k] = cur
    need = [-(-i * npos // 100) for i in range(RECALL_POINTS)]
    first = np.searchsorted(tp, need, side="left")
    pts = []
    for i, k in enumerate(first):
        if need[i] == 0:
            k = 0
        pts.append(int(best[k]) if k < n else None)
    return pts, tp, fp


def _ap_from_ranked(tp_flags, npos) -> float:
    if npos == 0:
        raise UndefinedMetricError("AP undefined without ground truth")
    if len(tp_flags) == 0:
        return 0.0
    pts, tp, fp = _interpolated_points(tp_flags, npos)
    total = Fraction(0)
    for k in pts:
        if k is not None:
            total += Fraction(int(tp[k]), int(tp[k] + fp[k]))
    return float(total / RECALL_POINTS)


def average_precision(preds, gts, cls: DefectClass, iou_thresh: float = 0.5,
                      mode: str = "box") -> float:
    """101-point interpolated AP for ``cls``.

    ``preds`` and ``gts`` map image id to instance lists. Raises
    UndefinedMetricError when the class has no ground truth.
    """
    ranked, npos = pr_records(preds, gts, cls, iou_thresh, mode)
    return _ap_from_ranked([tp for _, tp in ranked], npos)


def ap_oracle(tp_flags: Sequence[bool], npos: int) -> float:
    """Brute-force 101-point AP straight from the ranked TP/FP list.

    Enumerates every prefix of the ranking in exact rationals; shares no
    code with :func:`average_precision`.
    """
    if npos == 0:
        raise UndefinedMetricError("AP undefined without ground truth")
    stair = []
    tp = fp = 0
    for f in tp_flags:
        if f:
            tp += 1
        else:
            fp += 1
        stair.append((Fraction(tp, npos), Fraction(tp, tp + fp)))
    total = Fraction(0)
    for i in range(RECALL_POINTS):
        level = Fraction(i, 100)
        reached = [p for r, p in stair if r >= level]
        total += max(reached) if reached else 0
    return float(total / RECALL_POINTS)


def mean_ap(values: Iterable[float]) -> float:
    vals = list(values)
    if not vals:
        raise UndefinedMetricError("mAP undefined: no class has ground truth")
    return math.fsum(vals) / len(vals)


def round_half_up(x: float, digits: int = 2) -> float:
    q = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


def percent(x: float | None) -> float | None:
    return None if x is None else round_half_up(100.0 * x, 2)


@dataclass
class MapResult:
    per_class: dict[str, dict[float, float]]
    per_class_mean: dict[str, float]
    map: float | None
    excluded: list[str]

    def at(self, iou: float) -> dict[str, float]:
        return {c: v[iou] for c, v in self.per_class.items() if iou in v}

    def map_at(self, iou: float) -> float | None:
        vals = self.at(iou)
        return mean_ap(vals.values()) if vals else None


def map_over_range(preds, gts, iou_set=IOU_RANGE, mode: str = "box",
                   classes: Sequence[DefectClass] | None = None) -> MapResult:
    """Per-class AP over ``iou_set`` and mAP over classes with ground truth.

    ``classes`` defaults to the registry of the first instance's step.
    """
    if classes is None:
        step = next((x.defect_class.step for xs in (*gts.values(),
                                                    *preds.values())
                     for x in xs), None)
        classes = classes_for(step) if step is not None else ()
    per_class, means, excluded = {}, {}, []
    for cls in classes:
        try:
            aps = {t: average_precision(preds, gts, cls, t, mode)
                   for t in iou_set}
        except UndefinedMetricError:
            excluded.append(cls.name)
            continue
        per_class[cls.name] = aps
        means[cls.name] = math.fsum(aps.values()) / len(aps)
    m = mean_ap(means.values()) if means else None
    return MapResult(per_class, means, m, excluded)


# ----------------------------------------------------- manual metrics

@dataclass(frozen=True)
class PRCounts:
    tp: int
    fp: int
    fn: int
    defect_class: DefectClass | None = None

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be nonnegative")


def manual_precision(c: PRCounts) -> float:
    if c.tp + c.fp == 0:
        raise UndefinedMetricError("precision undefined: no detections")
    return c.tp / (c.tp + c.fp)


def manual_recall(c: PRCounts) -> float:
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("recall undefined: no ground truth")
    return c.tp / (c.tp + c.fn)


def manual_pr(c: PRCounts) -> tuple[float, float]:
    return manual_precision(c), manual_recall(c)


def gate(preds: Mapping[str, Sequence[DefectInstance]], floor: float):
    return {k: [p for p in v if p.confidence >= floor]
            for k, v in preds.items()}


def manual_ap(preds, gts, cls: DefectClass, mode: str = "box",
              confidence_floor: float = 0.7, iou_thresh: float = 0.5,
              recall_level: float = 0.5) -> float:
    """Interpolated precision at ``recall_level`` on gated detections
    (max precision over ranks whose recall reaches the level; 0.0 if the
    level is never reached)."""
    ranked, npos = pr_records(gate(preds, confidence_floor), gts, cls,
                              iou_thresh, mode)
    if npos == 0:
        raise UndefinedMetricError("AP undefined without ground truth")
    level = Fraction(recall_level).limit_denominator(10 ** 6)
    best = 0.0
    tp = fp = 0
    for _, flag in ranked:
        tp += flag
        fp += not flag
        if Fraction(tp, npos) >= level:
            best = max(best, tp / (tp + fp))
    return best


def count_matches(preds, gts, cls: DefectClass, iou_thresh: float = 0.5,
                  mode: str = "box") -> PRCounts:
    tp = fp = fn = 0
    for image_id in sorted(set(preds) | set(gts)):
        m = match_detections(_by_class(preds.get(image_id, ()), cls),
                             _by_class(gts.get(image_id, ()), cls),
                             iou_thresh, mode)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    return PRCounts(tp, fp, fn, cls)


# Published manual-metric run used as a consistency reference:
# (total, fn, fp, tp, reported AP %) per ADI class.
REFERENCE_MANUAL_ADI = {
    "microbridge": (47, 8, 9, 39, 72.58),
    "bridge": (19, 0, 0, 19, 100.00),
    "gap": (156, 1, 9, 147, 91.30),
    "probable_gap": (49, 17, 17, 31, 30.43),
    "line_collapse": (66, 0, 0, 66, 100.00),
}
REFERENCE_MANUAL_ADI_MAP = 78.86


def reference_consistency(reference=REFERENCE_MANUAL_ADI) -> list[dict]:
    """Check reported per-class AP against tp/(tp+fp) of the same counts.

    Classes whose reported AP is not reproduced by the precision formula
    (nor by recall) are flagged ``consistent=False``.
    """
    rows = []
    for name, (total, fn, fp, tp, reported) in reference.items():
        prec, rec = manual_pr(PRCounts(tp, fp, fn))
        rows.append({
            "class": name,
            "tp": tp, "fp": fp, "fn": fn,
            "precision_pct": percent(prec),
            "recall_pct": percent(rec),
            "reported_ap_pct": reported,
            "consistent": reported in (percent(prec), percent(rec)),
        })
    return rows


# --------------------------------------------------------------- timing

@dataclass
class TimingStats:
    samples_ms: list[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.samples_ms)

    @property
    def mean_ms(self) -> float:
        return math.fsum(self.samples_ms) / self.n if self.n else 0.0

    @property
    def min_ms(self) -> float:
        return min(self.samples_ms) if self.n else 0.0

    @property
    def max_ms(self) -> float:
        return max(self.samples_ms) if self.n else 0.0

    def to_dict(self) -> dict:
        return {"n": self.n, "mean_ms": self.mean_ms, "min_ms": self.min_ms,
                "max_ms": self.max_ms}


def time_stage(stage: Callable, images: Sequence, warmup: int = 1) -> TimingStats:
    """Wall-clock milliseconds per image for ``stage(image)`` only.

    ``warmup`` calls on the first image run first and are not recorded.
    """
    if not images:
        raise ValueError("time_stage needs at least one image")
    for _ in range(warmup):
        stage(images[0])
    stats = TimingStats()
    for im in images:
        t0 = time.perf_counter_ns()
        stage(im)
        stats.samples_ms.append((time.perf_counter_ns() - t0) / 1e6)
    return stats


def timing_table(rows: Sequence[tuple[str, str, TimingStats]]) -> str:
    """Markdown in the layout of an inference-speed table."""
    out = ["| Dataset | Model | Inference speed (ms/image) |",
           "|---|---|---|"]
    for dataset, model, st in rows:
        out.append(f"| {dataset} | {model} | {st.mean_ms:.2f} "
                   f"({st.min_ms:.2f} - {st.max_ms:.2f}) |")
    return "\n".join(out) + "\n"
