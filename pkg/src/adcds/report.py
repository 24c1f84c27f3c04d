"""Evaluation reports: assembly from manifests, JSON form and markdown tables.

Percentages are rounded half-up to two decimals. mAP values are computed
from the unrounded per-class APs and rounded once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .core import DISPLAY_NAMES, DatasetManifest, ProcessStep, classes_for
from .errors import ConfigError, UndefinedMetricError
from .metrics import IOU_RANGE, TimingStats, count_matches, gate, manual_ap, \
    manual_precision, manual_recall, map_over_range, mean_ap, percent, \
    reference_consistency, timing_table

# Column order of the report tables.
TABLE_ORDER = {
    ProcessStep.ADI: ("microbridge", "bridge", "gap", "probable_gap",
                      "line_collapse"),
    ProcessStep.AEI: ("thin_bridge", "single_bridge", "multi_bridge_nh",
                      "multi_bridge_h", "line_collapse"),
}

MANUAL_NOTE = ("Manual metrics: a detection is a true positive when its box "
               "IoU with an unmatched same-class ground-truth box is >= 0.5; "
               "detections below the confidence floor are dropped first; "
               "AP = interpolated precision at recall 0.5.")
UNDEFINED = "n/a"


@dataclass
class StageMetrics:
    """Per-class AP (%) at IoU 0.5 and averaged over the IoU set."""

    ap50: dict[str, float]
    ap: dict[str, float]
    map50: float | None
    map: float | None
    excluded: list[str]

    def to_dict(self) -> dict:
        return {"ap50": self.ap50, "ap": self.ap, "map50": self.map50,
                "map": self.map, "excluded": self.excluded}

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageMetrics":
        return cls(dict(d["ap50"]), dict(d["ap"]), d["map50"], d["map"],
                   list(d["excluded"]))


@dataclass
class EvalReport:
    step: ProcessStep
    n_images: int
    classes: list[str]
    detection: StageMetrics
    segmentation: StageMetrics | None
    manual: dict[str, dict]
    manual_map: float | None
    confidence_floor: float
    seed: int | None = None
    notes: list[str] = field(default_factory=list)
    reference_check: list[dict] | None = None
    diagnostics: dict[str, list[str]] = field(default_factory=dict)
    # kept out of to_dict(): wall-clock values differ between runs
    timing: dict[str, TimingStats] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "step": self.step.value,
            "n_images": self.n_images,
            "seed": self.seed,
            "classes": self.classes,
            "detection": self.detection.to_dict(),
            "segmentation": None if self.segmentation is None
            else self.segmentation.to_dict(),
            "manual": {"confidence_floor": self.confidence_floor,
                       "per_class": self.manual, "map": self.manual_map},
            "notes": self.notes,
            "reference_check": self.reference_check,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        try:
            seg = d.get("segmentation")
            return cls(
                step=ProcessStep.parse(d["step"]),
                n_images=int(d["n_images"]),
                classes=list(d["classes"]),
                detection=StageMetrics.from_dict(d["detection"]),
                segmentation=None if seg is None
                else StageMetrics.from_dict(seg),
                manual=dict(d["manual"]["per_class"]),
                manual_map=d["manual"]["map"],
                confidence_floor=d["manual"]["confidence_floor"],
                seed=d.get("seed"),
                notes=list(d.get("notes", [])),
                reference_check=d.get("reference_check"),
                diagnostics=dict(d.get("diagnostics", {})),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"not an evaluation report: {exc}") from None


def _stage(preds, gts, classes, iou_set, mode) -> StageMetrics:
    r = map_over_range(preds, gts, iou_set, mode, classes)
    ap50 = {c: percent(v[0.5]) for c, v in r.per_class.items() if 0.5 in v}
    return StageMetrics(
        ap50=ap50,
        ap={c: percent(v) for c, v in r.per_class_mean.items()},
        map50=percent(r.map_at(0.5)) if 0.5 in iou_set else None,
        map=percent(r.map), excluded=r.excluded)


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def evaluate(gt: DatasetManifest, preds: DatasetManifest,
             iou_set: Sequence[float] = IOU_RANGE,
             confidence_floor: float = 0.7, withhold_masks: bool = False,
             seed: int | None = None,
             diagnostics: Mapping[str, list[str]] | None = None
             ) -> EvalReport:
    """Detection box AP, segmentation mask AP and the manual metrics.

    Mask AP needs truth masks; with ``withhold_masks`` (or when any truth
    mask is missing) it is skipped and only the box-based manual metrics
    describe the segmentation stage.
    """
    if gt.step is not preds.step:
        raise ConfigError(f"ground truth is {gt.step.value}, predictions "
                          f"are {preds.step.value}")
    step = gt.step
    ordered = sorted(classes_for(step),
                     key=lambda c: TABLE_ORDER[step].index(c.name))
    gts = gt.by_image()
    pred_map = preds.by_image()
    for image_id in gts:
        pred_map.setdefault(image_id, [])

    detection = _stage(pred_map, gts, ordered, iou_set, "box")
    has_masks = all(x.mask is not None for xs in gts.values() for x in xs)
    segmentation = None
    if has_masks and not withhold_masks:
        masked = {k: [x for x in v if x.mask is not None]
                  for k, v in pred_map.items()}
        segmentation = _stage(masked, gts, ordered, iou_set, "mask")

    manual, manual_aps = {}, []
    gated = gate(pred_map, confidence_floor)
    for cls in ordered:
        c = count_matches(gated, gts, cls, 0.5, "box")
        ap = _safe(manual_ap, pred_map, gts, cls, "box", confidence_floor)
        if ap is not None:
            manual_aps.append(ap)
        manual[cls.name] = {
            "total": c.tp + c.fn, "fn": c.fn, "fp": c.fp, "tp": c.tp,
            "precision": percent(_safe(manual_precision, c)),
            "recall": percent(_safe(manual_recall, c)),
            "ap": percent(ap),
        }
    manual_map = percent(mean_ap(manual_aps)) if manual_aps else None

    notes = [MANUAL_NOTE]
    if segmentation is None:
        notes.append("Segmentation mask AP not computed: ground-truth masks "
                     "withheld or unavailable.")
    ref = None
    if step is ProcessStep.ADI:
        ref = reference_consistency()
        bad = [r["class"] for r in ref if not r["consistent"]]
        if bad:
            notes.append("Reference ADI manual-metric run: reported AP not "
                         "reproducible from its own TP/FP/FN counts for "
                         + ", ".join(DISPLAY_NAMES[b] for b in bad) + ".")
    return EvalReport(step, len(gt.images), [c.name for c in ordered],
                      detection, segmentation, manual, manual_map,
                      confidence_floor, seed, notes, ref,
                      {k: list(v) for k, v in (diagnostics or {}).items()
                       if v})


# ------------------------------------------------------------- markdown

def _fmt(v) -> str:
    return UNDEFINED if v is None else f"{v:.2f}"


def _row(label, values, tail="") -> str:
    return "| " + " | ".join([label, *values, tail]) + " |"


def _stage_table(title: str, sm: StageMetrics, classes) -> list[str]:
    head = [DISPLAY_NAMES[c] for c in classes]
    return [
        f"### {title}", "",
        _row("", head, "mAP (%)"),
        "|" + "---|" * (len(classes) + 2),
        _row("Per class AP @ IoU 0.5:0.95 (%)",
             [_fmt(sm.ap.get(c)) for c in classes], _fmt(sm.map)),
        _row("Per class AP @ IoU 0.5 (%)",
             [_fmt(sm.ap50.get(c)) for c in classes], _fmt(sm.map50)),
        "",
    ]


def _manual_table(r: EvalReport) -> list[str]:
    cls = r.classes
    m = r.manual
    return [
        f"### Manual segmentation metrics (confidence >= "
        f"{r.confidence_floor:g}, box IoU >= 0.5)", "",
        _row("", [DISPLAY_NAMES[c] for c in cls],
             "Segmentation mAP @ IoU 0.5 (%)"),
        "|" + "---|" * (len(cls) + 2),
        _row("Total instances", [str(m[c]["total"]) for c in cls]),
        _row("False negative", [str(m[c]["fn"]) for c in cls]),
        _row("False positives", [str(m[c]["fp"]) for c in cls]),
        _row("True positives", [str(m[c]["tp"]) for c in cls]),
        _row("Per class AP @ IoU 0.5 (%)", [_fmt(m[c]["ap"]) for c in cls],
             _fmt(r.manual_map)),
        "",
    ]


def render_markdown(r: EvalReport) -> str:
    seed = "" if r.seed is None else f", seed {r.seed}"
    out = [f"# Evaluation report: {r.step.value} ({r.n_images} images{seed})",
           ""]
    out += _stage_table("Detection", r.detection, r.classes)
    if r.segmentation is not None:
        out += _stage_table("Segmentation", r.segmentation, r.classes)
    out += _manual_table(r)
    excluded = r.detection.excluded
    if excluded:
        out += ["Excluded from mAP (no ground truth): "
                + ", ".join(DISPLAY_NAMES[c] for c in excluded) + ".", ""]
    out += ["## Notes", ""] + [f"- {n}" for n in r.notes] + [""]
    if r.reference_check:
        out += ["| Class | TP | FP | FN | Precision (%) | Recall (%) | "
                "Reported AP (%) | Consistent |", "|---|---|---|---|---|---|"
                "---|---|"]
        for row in r.reference_check:
            out.append(
                f"| {DISPLAY_NAMES[row['class']]} | {row['tp']} | "
                f"{row['fp']} | {row['fn']} | {_fmt(row['precision_pct'])} | "
                f"{_fmt(row['recall_pct'])} | "
                f"{_fmt(row['reported_ap_pct'])} | "
                f"{'yes' if row['consistent'] else 'NO'} |")
        out.append("")
    if r.diagnostics:
        out += ["## Diagnostics", ""]
        for image_id in sorted(r.diagnostics):
            for msg in r.diagnostics[image_id]:
                out.append(f"- {image_id}: {msg}")
        out.append("")
    return "\n".join(out)


def render_timing(step: ProcessStep, timing: Mapping[str, TimingStats]) -> str:
    rows = [(step.value, name, st) for name, st in timing.items()
            if st.samples_ms]
    return timing_table(rows) if rows else ""


# ------------------------------------------------------------ comparison

def compare_reports(reports: Sequence[tuple[str, EvalReport]],
                    stage: str = "detection") -> str:
    """Side-by-side per-class AP, one row per run, best value in bold."""
    if not reports:
        raise ConfigError("no reports to compare")
    steps = {r.step for _, r in reports}
    if len(steps) > 1:
        raise ConfigError("cannot compare reports from different process "
                          "steps: " + ", ".join(sorted(s.value for s in steps)))
    sms = []
    for label, r in reports:
        sm = getattr(r, stage)
        if sm is None:
            raise ConfigError(f"report {label!r} has no {stage} metrics")
        sms.append(sm)
    sets = {frozenset(sm.ap50) for sm in sms}
    if len(sets) > 1:
        raise ConfigError("cannot compare reports with different class sets")
    classes = [c for c in reports[0][1].classes if c in sms[0].ap50]

    out = [f"## {stage.capitalize()} comparison "
           f"({reports[0][1].step.value})", ""]
    for title, key, mkey in (("Per class AP @ IoU 0.5:0.95 (%)", "ap", "map"),
                             ("Per class AP @ IoU 0.5 (%)", "ap50", "map50")):
        cols = [[getattr(sm, key).get(c) for sm in sms] for c in classes]
        cols.append([getattr(sm, mkey) for sm in sms])
        out += [f"### {title}", "",
                _row("Run", [DISPLAY_NAMES[c] for c in classes], "mAP (%)"),
                "|" + "---|" * (len(classes) + 2)]
        for i, (label, _) in enumerate(reports):
            cells = []
            for col in cols:
                vals = [v for v in col if v is not None]
                best = max(vals) if vals else None
                v = col[i]
                cells.append(f"**{_fmt(v)}**" if v is not None and v == best
                             and len(reports) > 1 else _fmt(v))
            out.append("| " + " | ".join([label, *cells]) + " |")
        out.append("")
    return "\n".join(out)
