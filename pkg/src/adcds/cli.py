"""Command-line entry point: gen, detect, segment, eval, pipeline, report, bench.

A run is driven by one config file (JSON or YAML; ``ADCDS_CONFIG`` names
the default) whose values command-line flags override. Every output goes
under the run directory ``--out`` together with ``run_manifest.json``
holding the effective config, per-stage timing and sha256 digests of the
files written.

Exit codes: 0 success, 1 systemic failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml
from PIL import Image

from . import __version__, kernels
from .boxseg import SegConfig, segment_pipeline
from .core import DatasetManifest, ProcessStep, dumps_json, import_image, \
    load_manifest, save_manifest
from .detect import DetectorConfig, detect
from .errors import AdcdsError, ConfigError, ParameterError
from .metrics import IOU_RANGE, TimingStats, time_stage
from .report import EvalReport, compare_reports, evaluate, render_markdown, \
    render_timing
from .synthgen import GenConfig, default_workers, generate_dataset, \
    generate_sample, plan_dataset

log = logging.getLogger("adcds")

CONFIG_ENV = "ADCDS_CONFIG"
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    step: ProcessStep = ProcessStep.ADI
    seed: int = 0
    out: str = "run"
    dataset: str | None = None
    predictions: str | None = None
    report_dir: str | None = None
    workers: int | None = None
    overlays: bool = False
    gen: dict = field(default_factory=dict)
    detector: dict = field(default_factory=dict)
    segmentation: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    _METRIC_KEYS = ("iou_set", "confidence_floor", "withhold_masks")

    def __post_init__(self):
        self.step = ProcessStep.parse(self.step)
        # validate eagerly so bad configs fail before any work
        self.gen_config()
        self.detector_config()
        self.seg_config()
        unknown = set(self.metrics) - set(self._METRIC_KEYS)
        if unknown:
            raise ConfigError(f"unknown metric options: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__ if not f.startswith("_")}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**dict(d))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return {"step": self.step.value, "seed": self.seed, "out": self.out,
                "dataset": self.dataset_dir, "predictions":
                self.predictions_path, "report_dir": self.report_path,
                "workers": self.n_workers, "overlays": self.overlays,
                "gen": self.gen_config().to_dict(),
                "detector": self.detector_config().to_dict(),
                "segmentation": self.seg_config().to_dict(),
                "metrics": self.metric_options()}

    # resolved views
    @property
    def dataset_dir(self) -> str:
        return self.dataset or str(Path(self.out) / "dataset")

    @property
    def predictions_path(self) -> str:
        return self.predictions or str(Path(self.out) / "predictions.json")

    @property
    def report_path(self) -> str:
        return self.report_dir or str(Path(self.out) / "report")

    @property
    def n_workers(self) -> int:
        return self.workers or default_workers()

    def gen_config(self) -> GenConfig:
        d = dict(self.gen)
        d.setdefault("n_images", 100)
        d["step"], d["seed"] = self.step.value, self.seed
        try:
            return GenConfig.from_dict(d).resolved()
        except (TypeError, ParameterError) as exc:
            raise ConfigError(f"invalid generator config: {exc}") from None

    def detector_config(self) -> DetectorConfig:
        d = dict(self.detector)
        d.pop("step", None)
        # AP needs the whole ranked list; the floor gates manual metrics only
        d.setdefault("confidence_floor", 0.0)
        try:
            return DetectorConfig.preset(self.step, **d)
        except TypeError as exc:
            raise ConfigError(f"invalid detector config: {exc}") from None

    def seg_config(self) -> SegConfig:
        try:
            return SegConfig.from_dict(self.segmentation, self.step)
        except TypeError as exc:
            raise ConfigError(f"invalid segmentation config: {exc}") from None

    def metric_options(self) -> dict:
        m = {"iou_set": list(IOU_RANGE), "confidence_floor": 0.7,
             "withhold_masks": False}
        m.update(self.metrics)
        return m


def load_config_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    try:
        data = json.loads(text) if p.suffix == ".json" else \
            yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {p} must hold a mapping")
    return data


# ------------------------------------------------------------ run manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    timing_s: dict[str, float] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)

    def add_outputs(self, root: Path, paths: Sequence[Path]):
        """Digest each file, keyed relative to ``root`` when inside it."""
        root = root.resolve()
        for p in sorted(Path(x).resolve() for x in paths):
            key = p.relative_to(root).as_posix() if root in p.parents \
                else str(p)
            self.outputs[key] = sha256_file(p)

    def to_dict(self) -> dict:
        return {"tool": "adcds", "version": __version__,
                "command": self.command, "kernel_backend": kernels.BACKEND,
                "seed": self.config.get("seed"), "config": self.config,
                "timing_s": self.timing_s, "outputs": self.outputs}

    def write(self, root: Path) -> Path:
        path = root / "run_manifest.json"
        path.write_text(dumps_json(self.to_dict()))
        return path


class _Stopwatch:
    def __init__(self, manifest: RunManifest, stage: str):
        self.m, self.stage = manifest, stage

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.m.timing_s[self.stage] = round(time.perf_counter() - self.t0, 6)


def _files_under(root: Path) -> list[Path]:
    return [p for p in root.rglob("*") if p.is_file()
            and p.name != "run_manifest.json"]


# ---------------------------------------------------------- per-image work

def _load_image(dataset_dir: Path, manifest: DatasetManifest, image_id: str):
    rec = manifest.image(image_id)
    return import_image(dataset_dir / rec.file_name, manifest.step, image_id)


def _process(args):
    """Detect and (optionally) segment one image; never raises."""
    dataset_dir, file_name, step, image_id, det_cfg, seg_cfg, seeds = args
    diags: list[str] = []
    try:
        image = import_image(Path(dataset_dir) / file_name, step, image_id)
    except (AdcdsError, OSError) as exc:
        return image_id, [], [f"image unreadable: {exc}"], None, None
    det_ms = seg_ms = None
    if seeds is None:
        t0 = time.perf_counter_ns()
        try:
            dets = detect(image, det_cfg)
        except AdcdsError as exc:
            return image_id, [], [f"detection failed: {exc}"], None, None
        det_ms = (time.perf_counter_ns() - t0) / 1e6
        if dets.diagnostic:
            diags.append(dets.diagnostic)
        instances = [d.instance for d in dets]
    else:
        instances = list(seeds)
    if seg_cfg is not None and instances:
        t0 = time.perf_counter_ns()
        results = segment_pipeline(image, instances, seg_cfg)
        seg_ms = (time.perf_counter_ns() - t0) / 1e6
        instances = [r.instance for r in results]
        diags += [f"ROI {i}: {r.diagnostic}" for i, r in enumerate(results)
                  if r.diagnostic]
    return image_id, instances, diags, det_ms, seg_ms


def _run_images(cfg: RunConfig, manifest: DatasetManifest, detect_stage: bool,
                segment_stage: bool, seeds=None):
    dataset_dir = Path(cfg.dataset_dir)
    det_cfg = cfg.detector_config()
    seg_cfg = cfg.seg_config() if segment_stage else None
    jobs = [(str(dataset_dir), rec.file_name, manifest.step, rec.id, det_cfg,
             seg_cfg, None if detect_stage else seeds.get(rec.id, []))
            for rec in manifest.images]
    if jobs:
        _process(jobs[0])  # warm-up: jit caches and imports
    workers = min(cfg.n_workers, len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_process, jobs))
    else:
        out = [_process(j) for j in jobs]
    # merged by image id, independent of completion order
    out.sort(key=lambda r: r[0])
    preds, diags = {}, {}
    timing = {"detect": TimingStats(), "segment": TimingStats()}
    for image_id, instances, d, det_ms, seg_ms in out:
        preds[image_id] = instances
        if d:
            diags[image_id] = d
        if det_ms is not None:
            timing["detect"].samples_ms.append(det_ms)
        if seg_ms is not None:
            timing["segment"].samples_ms.append(seg_ms)
    return preds, diags, timing


def _predictions_manifest(gt: DatasetManifest, preds, diags, cfg: RunConfig,
                          stage: str) -> DatasetManifest:
    anns = tuple((rec.id, inst) for rec in gt.images
                 for inst in preds.get(rec.id, ()))
    info = {"kind": "predictions", "stage": stage, "seed": cfg.seed,
            "dataset": gt.info.get("seed"), "diagnostics": diags}
    return DatasetManifest(gt.step, gt.images, anns, info)


def _write_overlays(gt: DatasetManifest, preds, dataset_dir: Path, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in gt.images:
        px = _load_image(dataset_dir, gt, rec.id).pixels
        rgb = np.repeat(px[:, :, None], 3, axis=2)
        for inst in preds.get(rec.id, ()):
            if inst.mask is not None and not inst.mask.is_empty():
                m = inst.mask.to_array()
                inner = m.copy()
                inner[1:-1, 1:-1] = (m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1]
                                     & m[1:-1, :-2] & m[1:-1, 2:])
                rgb[m & ~inner] = (0, 255, 0)
            b = inst.bbox
            x1, y1 = b.x_max - 1, b.y_max - 1
            rgb[b.y_min, b.x_min:b.x_max] = (255, 0, 0)
            rgb[y1, b.x_min:b.x_max] = (255, 0, 0)
            rgb[b.y_min:b.y_max, b.x_min] = (255, 0, 0)
            rgb[b.y_min:b.y_max, x1] = (255, 0, 0)
        p = out / f"{rec.id}.png"
        Image.fromarray(rgb, mode="RGB").save(p, format="PNG")
        written.append(p)
    return written


def _write_report(report: EvalReport, report_dir: Path) -> list[Path]:
    report_dir.mkdir(parents=True, exist_ok=True)
    paths = [report_dir / "report.json", report_dir / "report.md"]
    paths[0].write_text(dumps_json(report.to_dict()))
    paths[1].write_text(render_markdown(report))
    if any(st.samples_ms for st in report.timing.values()):
        t = report_dir / "timing.json"
        t.write_text(dumps_json({k: v.to_dict()
                                 for k, v in report.timing.items()}))
        (report_dir / "timing.md").write_text(
            render_timing(report.step, report.timing))
        paths += [t, report_dir / "timing.md"]
    return paths


def _load_dataset(cfg: RunConfig) -> DatasetManifest:
    path = Path(cfg.dataset_dir) / "manifest.json"
    manifest = load_manifest(path)
    if manifest.step is not cfg.step:
        raise ConfigError(f"dataset {path} is {manifest.step.value}, run is "
                          f"configured for {cfg.step.value}")
    return manifest


# -------------------------------------------------------------- commands

def cmd_gen(cfg: RunConfig) -> DatasetManifest:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rm = RunManifest("gen", cfg.to_dict())
    g = cfg.gen_config()
    with _Stopwatch(rm, "gen"):
        manifest = generate_dataset(
            cfg.step, g.n_images, g.class_mix, g.pattern, cfg.dataset_dir,
            cfg.seed, cfg.n_workers, count_range=g.count_range,
            p_empty=g.p_empty, size=g.size)
    rm.add_outputs(out, _files_under(Path(cfg.dataset_dir)))
    rm.write(out)
    return manifest


def cmd_detect(cfg: RunConfig) -> DatasetManifest:
    out = Path(cfg.out)
    gt = _load_dataset(cfg)
    out.mkdir(parents=True, exist_ok=True)
    rm = RunManifest("detect", cfg.to_dict())
    with _Stopwatch(rm, "detect"):
        preds, diags, _ = _run_images(cfg, gt, True, False)
    pm = _predictions_manifest(gt, preds, diags, cfg, "detect")
    save_manifest(pm, cfg.predictions_path)
    rm.add_outputs(out, [Path(cfg.predictions_path)])
    rm.write(out)
    return pm


def cmd_segment(cfg: RunConfig, output: str | None = None) -> DatasetManifest:
    out = Path(cfg.out)
    gt = _load_dataset(cfg)
    seeds = load_manifest(cfg.predictions_path)
    out.mkdir(parents=True, exist_ok=True)
    rm = RunManifest("segment", cfg.to_dict())
    seed_map = {k: [x.without_mask() for x in v]
                for k, v in seeds.by_image().items()}
    with _Stopwatch(rm, "segment"):
        preds, diags, _ = _run_images(cfg, gt, False, True, seed_map)
    pm = _predictions_manifest(gt, preds, diags, cfg, "segment")
    target = Path(output) if output else out / "predictions_masks.json"
    save_manifest(pm, target)
    written = [target]
    if cfg.overlays:
        written += _write_overlays(gt, preds, Path(cfg.dataset_dir),
                                   out / "overlays")
    rm.add_outputs(out, written)
    rm.write(out)
    return pm


def cmd_eval(cfg: RunConfig, gt_path: str | None = None,
             pred_path: str | None = None) -> EvalReport:
    out = Path(cfg.out)
    gt = load_manifest(gt_path or Path(cfg.dataset_dir) / "manifest.json")
    preds = load_manifest(pred_path or cfg.predictions_path)
    m = cfg.metric_options()
    report = evaluate(gt, preds, tuple(m["iou_set"]), m["confidence_floor"],
                      m["withhold_masks"], cfg.seed,
                      preds.info.get("diagnostics"))
    out.mkdir(parents=True, exist_ok=True)
    rm = RunManifest("eval", cfg.to_dict())
    rm.add_outputs(out, _write_report(report, Path(cfg.report_path)))
    rm.write(out)
    return report


def cmd_pipeline(cfg: RunConfig) -> EvalReport:
    """gen (when the dataset is missing) -> detect -> segment -> evaluate."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rm = RunManifest("pipeline", cfg.to_dict())
    written: list[Path] = []
    if not (Path(cfg.dataset_dir) / "manifest.json").exists():
        with _Stopwatch(rm, "gen"):
            cmd_gen(cfg)
        written += _files_under(Path(cfg.dataset_dir))
    gt = _load_dataset(cfg)
    with _Stopwatch(rm, "detect+segment"):
        preds, diags, timing = _run_images(cfg, gt, True, True)
    pm = _predictions_manifest(gt, preds, diags, cfg, "pipeline")
    save_manifest(pm, cfg.predictions_path)
    written.append(Path(cfg.predictions_path))
    m = cfg.metric_options()
    with _Stopwatch(rm, "eval"):
        report = evaluate(gt, pm, tuple(m["iou_set"]), m["confidence_floor"],
                          m["withhold_masks"], cfg.seed, diags)
    report.timing = timing
    written += _write_report(report, Path(cfg.report_path))
    if cfg.overlays:
        written += _write_overlays(gt, preds, Path(cfg.dataset_dir),
                                   out / "overlays")
    rm.add_outputs(out, written)
    rm.write(out)
    return report


def cmd_report(paths: Sequence[str], stage: str = "detection") -> str:
    reports = []
    for p in paths:
        try:
            data = json.loads(Path(p).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {p}: {exc}") from None
        # label by run directory: <run>/report/report.json -> <run>
        path = Path(p).resolve()
        if path.name == "report.json":
            path = path.parent.parent if path.parent.name == "report" \
                else path.parent
        label = path.name if path.is_dir() else path.stem
        reports.append((label, EvalReport.from_dict(data)))
    return compare_reports(reports, stage)


def cmd_bench(cfg: RunConfig, n_images: int = 20) -> dict[str, TimingStats]:
    """Per-image timing of detection and segmentation on in-memory images."""
    g = replace(cfg.gen_config(), n_images=n_images)
    plan = plan_dataset(g)
    images = [generate_sample(g.step, plan[i], g.pattern, g.size, g.seed, i,
                              f"bench_{i}").image for i in range(n_images)]
    det_cfg, seg_cfg = cfg.detector_config(), cfg.seg_config()
    rois = {im.id: [d.instance for d in detect(im, det_cfg)] for im in images}
    return {
        "detect": time_stage(lambda im: detect(im, det_cfg), images),
        "segment": time_stage(
            lambda im: segment_pipeline(im, rois[im.id], seg_cfg), images),
    }


# ------------------------------------------------------------------ argv

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="config file (JSON or YAML); "
                        f"default from ${CONFIG_ENV}")
    common.add_argument("--step", choices=["adi", "aei"],
                        type=str.lower)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="run directory")
    common.add_argument("--workers", type=int)
    common.add_argument("--dataset", help="dataset directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adcds", description=__doc__.split(
        "\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate a dataset")
    s.add_argument("-n", "--n-images", type=int)

    s = sub.add_parser("detect", parents=[common], help="run detection")
    s.add_argument("--predictions", help="output predictions JSON")

    s = sub.add_parser("segment", parents=[common],
                       help="segment ROIs from a predictions file")
    s.add_argument("--predictions", help="input predictions JSON")
    s.add_argument("--output", help="output predictions-with-masks JSON")
    s.add_argument("--overlays", action="store_true")

    s = sub.add_parser("eval", parents=[common], help="evaluate predictions")
    s.add_argument("--gt", help="ground-truth manifest")
    s.add_argument("--predictions", help="predictions JSON")
    s.add_argument("--withhold-masks", action="store_true")

    s = sub.add_parser("pipeline", parents=[common],
                       help="gen (if needed), detect, segment, evaluate")
    s.add_argument("-n", "--n-images", type=int)
    s.add_argument("--overlays", action="store_true")
    s.add_argument("--withhold-masks", action="store_true")

    s = sub.add_parser("report", help="compare evaluation reports")
    s.add_argument("reports", nargs="+")
    s.add_argument("--stage", choices=["detection", "segmentation"],
                   default="detection")
    s.add_argument("--output", help="write markdown here instead of stdout")

    s = sub.add_parser("bench", parents=[common], help="stage timing only")
    s.add_argument("-n", "--n-images", type=int, default=20)
    return p


def config_from_args(args) -> RunConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    data: dict[str, Any] = load_config_file(path) if path else {}
    for key in ("seed", "out", "workers", "dataset"):
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    if args.step is not None:
        data["step"] = args.step
    if getattr(args, "predictions", None) is not None:
        data["predictions"] = args.predictions
    if getattr(args, "overlays", False):
        data["overlays"] = True
    n = getattr(args, "n_images", None)
    if n is not None and args.command in ("gen", "pipeline"):
        data["gen"] = {**data.get("gen", {}), "n_images": n}
    if getattr(args, "withhold_masks", False):
        data["metrics"] = {**data.get("metrics", {}), "withhold_masks": True}
    return RunConfig.from_dict(data)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False)
        else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            md = cmd_report(args.reports, args.stage)
            if args.output:
                Path(args.output).write_text(md)
            else:
                sys.stdout.write(md)
            return EXIT_OK
        cfg = config_from_args(args)
        if args.command == "gen":
            m = cmd_gen(cfg)
            print(f"wrote {len(m.images)} images, {len(m.annotations)} "
                  f"instances to {cfg.dataset_dir}")
        elif args.command == "detect":
            m = cmd_detect(cfg)
            print(f"wrote {len(m.annotations)} detections to "
                  f"{cfg.predictions_path}")
        elif args.command == "segment":
            m = cmd_segment(cfg, args.output)
            print(f"segmented {len(m.annotations)} ROIs")
        elif args.command == "eval":
            r = cmd_eval(cfg, args.gt, args.predictions)
            sys.stdout.write(render_markdown(r))
        elif args.command == "pipeline":
            r = cmd_pipeline(cfg)
            sys.stdout.write(render_markdown(r))
        elif args.command == "bench":
            stats = cmd_bench(cfg, args.n_images)
            sys.stdout.write(render_timing(cfg.step, stats))
    except (ConfigError, ParameterError) as exc:
        print(f"adcds: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AdcdsError, OSError) as exc:
        print(f"adcds: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
