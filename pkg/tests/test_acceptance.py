"""Release acceptance suite: one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Criteria 5, 8 and 9 run the full synthetic benchmark (about two minutes on
one core); select them with ``-m slow``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from adcds.boxseg import SegConfig, and_refine, neighbor_fill, \
    segment_pipeline
from adcds.cli import RunConfig, cmd_pipeline
from adcds.core import (BBox, DatasetManifest, DefectClass, DefectInstance,
                        InstanceMask, import_image, load_manifest)
from adcds.detect import DetectorConfig, detect
from adcds.metrics import (IOU_RANGE, PRCounts, ap_oracle, average_precision,
                           count_matches, manual_pr, match_detections,
                           mean_ap, percent, pr_records, round_half_up)
from adcds.report import evaluate
from adcds.synthgen import new_sample

from conftest import flat_spec, sample_with

GOLDEN = Path(__file__).parent / "golden"


# ----------------------------------------------------------- 1: mAP

REFERENCE_MAPS = [
    ((99.53, 96.40, 84.25, 97.21, 100.00), 95.48),
    ((76.63, 86.92, 68.84, 28.64, 99.93), 72.19),
    ((72.58, 100.00, 91.30, 30.43, 100.00), 78.86),
]


def test_c1_map_aggregation(criterion):
    t0 = time.perf_counter()
    got = [round_half_up(mean_ap(v / 100 for v in vals) * 100, 2)
           for vals, _ in REFERENCE_MAPS]
    want = [w for _, w in REFERENCE_MAPS]
    ok = got == want and time.perf_counter() - t0 < 1
    assert criterion(1, ok, f"mAP aggregation {got} vs {want}")


# ------------------------------------------------------- 2: manual metrics

def test_c2_manual_metrics(criterion):
    bridge = percent(manual_pr(PRCounts(19, 0, 0))[0])
    lc = percent(manual_pr(PRCounts(66, 0, 0))[0])
    r = evaluate(DatasetManifest("adi"), DatasetManifest("adi"))
    flagged = sorted(x["class"] for x in r.reference_check
                     if not x["consistent"])
    note = any("Gap" in n and "Microbridge" in n and "Probable gap" in n
               for n in r.notes)
    ok = (bridge == 100.0 and lc == 100.0 and note
          and flagged == ["gap", "microbridge", "probable_gap"])
    assert criterion(2, ok, f"Bridge {bridge:.2f}%, Line collapse {lc:.2f}%,"
                     f" flagged {flagged}")


# ------------------------------------------- 3/4: randomized AP and matching

GAP = DefectClass("adi", "gap")
BRIDGE = DefectClass("adi", "bridge")


def _random_instance(rng, max_preds=10, max_gts=5):
    def box():
        x, y = rng.integers(0, 40, 2)
        w, h = rng.integers(1, 16, 2)
        return BBox(int(x), int(y), int(x + w), int(y + h))
    gts = [DefectInstance(GAP if rng.random() < 0.8 else BRIDGE, box())
           for _ in range(rng.integers(0, max_gts + 1))]
    preds = []
    for _ in range(rng.integers(0, max_preds + 1)):
        if gts and rng.random() < 0.6:
            # jitter a ground-truth box to spread IoUs across thresholds
            g = gts[rng.integers(len(gts))].bbox
            dx, dy = rng.integers(-4, 5, 2)
            b = BBox(max(0, g.x_min + dx), max(0, g.y_min + dy),
                     max(1, g.x_max + dx), max(1, g.y_max + dy))
            if b.x_max <= b.x_min or b.y_max <= b.y_min:
                b = g
        else:
            b = box()
        conf = float(rng.choice([0.3, 0.5, 0.9])) if rng.random() < 0.3 \
            else float(rng.random())
        preds.append(DefectInstance(GAP if rng.random() < 0.8 else BRIDGE,
                                    b, None, conf))
    return preds, gts


def test_c3_ap_oracle(criterion):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    mismatches = checked = 0
    for _ in range(1000):
        preds, gts = _random_instance(rng)
        P, G = {"x": preds}, {"x": gts}
        for t in (0.5, 0.75):
            ranked, npos = pr_records(P, G, GAP, t)
            if npos == 0:
                continue
            checked += 1
            if average_precision(P, G, GAP, t) != \
                    ap_oracle([f for _, f in ranked], npos):
                mismatches += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and checked > 1000 and dt < 10
    assert criterion(3, ok, f"{mismatches} mismatches in {checked} AP "
                     f"comparisons over 1000 instances, {dt:.1f} s")


def test_c4_matching_conservation(criterion):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    violations = 0
    for _ in range(1000):
        preds, gts = _random_instance(rng)
        for cls in (GAP, BRIDGE):
            p = [x for x in preds if x.defect_class == cls]
            g = [x for x in gts if x.defect_class == cls]
            for t in IOU_RANGE:
                m = match_detections(p, g, t)
                if m.tp + m.fn != len(g) or m.tp + m.fp != len(p):
                    violations += 1
    dt = time.perf_counter() - t0
    ok = violations == 0 and dt < 10
    assert criterion(4, ok, f"{violations} conservation violations, "
                     f"{dt:.1f} s")


# ------------------------------------------------- 5/8/9: full benchmark

def _release(out_root: Path) -> dict[str, RunConfig]:
    rel = json.loads((GOLDEN / "release.json").read_text())
    return {name: RunConfig.from_dict({**run, "seed": rel["seed"],
                                       "out": str(out_root / name)})
            for name, run in rel["runs"].items()}


@pytest.fixture(scope="module")
def benchmark_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    cfgs = _release(root)
    t0 = time.perf_counter()
    reports = {name: cmd_pipeline(cfg) for name, cfg in cfgs.items()}
    return cfgs, reports, time.perf_counter() - t0


@pytest.mark.slow
def test_c5_synthetic_benchmark(criterion, benchmark_runs):
    cfgs, reports, dt = benchmark_runs
    aei, adi = reports["aei"], reports["adi"]
    golden_ok = all(
        Path(cfgs[n].report_path, "report.json").read_text()
        == (GOLDEN / f"{n}_report.json").read_text() for n in cfgs)
    floors = (aei.detection.map50 >= 90.0
              and aei.segmentation.map50 >= 90.0
              and adi.detection.map50 >= 60.0
              and adi.detection.map50 < aei.detection.map50)
    ok = golden_ok and floors and dt < 300
    assert criterion(5, ok, (
        f"AEI det {aei.detection.map50:.2f} seg "
        f"{aei.segmentation.map50:.2f}, ADI det {adi.detection.map50:.2f} "
        f"(mAP@0.5 %); golden match {golden_ok}; {dt:.0f} s"))


def test_c6_box_confinement(criterion):
    rng = np.random.default_rng(6)
    noisy = dict(noise_sigma=20.0, edge_roughness_sigma=0.4)
    images = [
        sample_with("adi", "bridge", extent=5, spec=flat_spec(**noisy)).image,
        sample_with("adi", "gap", extent=12, spec=flat_spec(
            orientation="horizontal", **noisy)).image,
        sample_with("aei", "multi_bridge_h", span=2, extent=6).image,
        new_sample(flat_spec(), 256, 256, "adi").image,
    ]
    cfgs = [SegConfig(), SegConfig.preset("adi"), SegConfig.preset("aei"),
            SegConfig(box_dilation=0, local_threshold="midpoint"),
            SegConfig(box_dilation=5, polarity="bright", refine_passes=3)]
    t0 = time.perf_counter()
    violations = n = 0
    for k in range(10_000):
        im = images[k % len(images)]
        cfg = cfgs[k % len(cfgs)]
        h, w = im.pixels.shape
        x0, y0 = (int(v) for v in rng.integers(0, [w, h]))
        bw, bh = (int(v) for v in rng.integers(1, 48, 2))
        box = BBox(x0, y0, min(w, x0 + bw), min(h, y0 + bh))
        (r,) = segment_pipeline(im, [(GAP, box)], cfg)
        n += 1
        allowed = np.zeros((h, w), bool)
        allowed[box.dilate(cfg.box_dilation, w, h).slices()] = True
        if (r.mask.to_array() & ~allowed).any():
            violations += 1
    dt = time.perf_counter() - t0
    ok = violations == 0 and dt < 30
    assert criterion(6, ok, f"{violations} violations in {n} ROIs, "
                     f"{dt:.1f} s")


def test_c7_refinement_algebra(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    s = sample_with("adi", "gap", extent=10)
    pred = s.truth[0].mask
    full = InstanceMask.from_array(np.ones(pred.shape, bool))
    empty = InstanceMask.empty(*pred.shape)
    binary = InstanceMask.from_array(s.image.pixels > 120)
    once = and_refine(pred, binary)
    algebra = (and_refine(full, binary) == binary
               and and_refine(pred, empty).is_empty()
               and and_refine(once, binary) == once)
    identity_fail = 0
    for _ in range(1000):
        shape = tuple(int(v) for v in rng.integers(1, 40, 2))
        m = InstanceMask.from_array(rng.random(shape) < rng.random())
        nb = int(rng.choice([4, 8]))
        if neighbor_fill(m, 0, nb) != m:
            identity_fail += 1
    dt = time.perf_counter() - t0
    ok = algebra and identity_fail == 0 and dt < 5
    assert criterion(7, ok, f"and_refine algebra {algebra}; passes=0 "
                     f"identity failures {identity_fail}/1000; {dt:.1f} s")


@pytest.mark.slow
def test_c8_query_budget(criterion, benchmark_runs):
    cfgs, _, _ = benchmark_runs
    t0 = time.perf_counter()

    def run(name, k):
        cfg = cfgs[name]
        gt = load_manifest(Path(cfg.dataset_dir) / "manifest.json")
        det_cfg = DetectorConfig.preset(cfg.step, max_detections=k,
                                        confidence_floor=0.0)
        preds = {}
        for rec in gt.images:
            im = import_image(Path(cfg.dataset_dir) / rec.file_name,
                              gt.step, rec.id)
            preds[rec.id] = [d.instance for d in detect(im, det_cfg)]
        gts = gt.by_image()
        return {c: count_matches(preds, gts, c) for c in gt.categories}

    adi5, adi100 = run("adi", 5), run("adi", 100)
    recall_ok = all(adi100[c].tp >= adi5[c].tp for c in adi5)
    aei5, aei100 = run("aei", 5), run("aei", 100)

    def precision(counts):
        tp = sum(c.tp for c in counts.values())
        fp = sum(c.fp for c in counts.values())
        return tp / (tp + fp) if tp + fp else 1.0
    p5, p100 = precision(aei5), precision(aei100)
    dt = time.perf_counter() - t0
    ok = recall_ok and p5 >= p100 and dt < 120
    rec = ", ".join(f"{c.name} {adi5[c].tp}->{adi100[c].tp}" for c in adi5)
    assert criterion(8, ok, f"ADI TP @5->@100: {rec}; AEI precision @5 "
                     f"{p5:.4f} >= @100 {p100:.4f}; {dt:.0f} s")


@pytest.mark.slow
def test_c9_determinism(criterion, benchmark_runs, tmp_path):
    cfgs, _, _ = benchmark_runs
    t0 = time.perf_counter()
    diffs = []
    for name, cfg in cfgs.items():
        again = RunConfig.from_dict({**_strip(cfg), "out": str(tmp_path
                                                             / name)})
        cmd_pipeline(again)
        for rel in ("dataset/manifest.json", "predictions.json",
                    "report/report.json"):
            a = (Path(cfg.out) / rel).read_bytes()
            b = (Path(again.out) / rel).read_bytes()
            if a != b:
                diffs.append(f"{name}/{rel}")
    dt = time.perf_counter() - t0
    ok = not diffs and dt < 600
    assert criterion(9, ok, f"byte-identical predictions, masks and reports "
                     f"across two runs per step; diffs {diffs}; {dt:.0f} s")


def _strip(cfg: RunConfig) -> dict:
    return {"step": cfg.step.value, "seed": cfg.seed, "gen": cfg.gen,
            "detector": cfg.detector, "segmentation": cfg.segmentation,
            "metrics": cfg.metrics, "workers": cfg.workers}
