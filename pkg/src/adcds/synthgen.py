"""Seeded line-space SEM-like images with injected defects and exact truth.

This is a desk-scale test oracle, not a physical SEM simulator: lines are
flat intensity bands with per-row edge jitter and additive Gaussian noise.
All randomness comes from numpy's PCG64 bit generator; image ``i`` of a
dataset draws from ``SeedSequence(seed, spawn_key=(i,))`` so images are
independent of each other and of generation order.

Geometry is built in a "vertical frame" (lines run along rows); horizontal
patterns are transposed on output.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    CLASS_NAMES,
    DEFAULT_IMAGE_SIZE,
    BBox,
    DatasetManifest,
    DefectClass,
    DefectInstance,
    ImageRecord,
    InstanceMask,
    ProcessStep,
    SemImage,
    canonical_class_name,
    save_manifest,
    write_png,
)
from .errors import ParameterError, PlacementError

log = logging.getLogger(__name__)

# Per-class instance totals of the reference datasets (train split).
DEFAULT_CLASS_MIX = {
    ProcessStep.ADI: {"gap": 1046, "probable_gap": 315, "bridge": 238,
                      "microbridge": 380, "line_collapse": 550},
    ProcessStep.AEI: {"multi_bridge_nh": 179, "multi_bridge_h": 90,
                      "single_bridge": 271, "thin_bridge": 270,
                      "line_collapse": 236},
}

_PLAN_KEY = 2 ** 31


@dataclass(frozen=True)
class PatternSpec:
    pitch: int
    line_width: int
    orientation: str = "vertical"
    line_intensity: int = 200
    space_intensity: int = 60
    edge_roughness_sigma: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self, width: int, height: int) -> None:
        if self.orientation not in ("vertical", "horizontal"):
            raise ParameterError(f"orientation {self.orientation!r}")
        if not 0 < self.line_width < self.pitch:
            raise ParameterError("need 0 < line_width < pitch")
        if self.line_intensity == self.space_intensity:
            raise ParameterError("line and space intensity must differ")
        for v in (self.line_intensity, self.space_intensity):
            if not 0 <= v <= 255:
                raise ParameterError("intensities must be 8-bit levels")
        if self.edge_roughness_sigma < 0 or self.noise_sigma < 0:
            raise ParameterError("sigmas must be nonnegative")
        if min(width, height) < 3 * self.pitch:
            raise ParameterError("image must hold at least 3 pitches")


@dataclass(frozen=True)
class DefectSpec:
    """One defect to inject.

    ``anchor`` is (line index, position along the line). ``span`` is the
    number of consecutive spaces crossed by multi-bridges and is ignored by
    every other class.
    """

    defect_class: DefectClass
    anchor: tuple[int, int]
    extent: int
    severity: float = 1.0
    span: int = 2

    def __post_init__(self):
        if self.extent < 1:
            raise ParameterError("extent must be >= 1")
        if not 0.0 < self.severity <= 1.0:
            raise ParameterError("severity must lie in (0, 1]")
        if self.span < 2:
            raise ParameterError("span must be >= 2")


@dataclass(frozen=True, eq=False)
class GeneratedSample:
    image: SemImage
    truth: tuple[DefectInstance, ...]
    clean_pattern_mask: InstanceMask
    spec: PatternSpec = field(repr=False)
    # vertical-frame layers: noiseless canvas, additive noise, line edges
    canvas: np.ndarray = field(repr=False)
    noise: np.ndarray = field(repr=False)
    left: np.ndarray = field(repr=False)
    right: np.ndarray = field(repr=False)
    occupied: np.ndarray = field(repr=False, default=None)

    @property
    def n_lines(self) -> int:
        return self.left.shape[1]

    def noiseless(self) -> np.ndarray:
        return _to_image_frame(self.canvas, self.spec.orientation)


def _to_image_frame(a, orientation):
    return np.ascontiguousarray(a.T) if orientation == "horizontal" else a


def _compose(canvas, noise):
    return np.clip(np.rint(canvas.astype(np.float64) + noise), 0, 255) \
        .astype(np.uint8)


def _line_edges(spec: PatternSpec, along: int, across: int, rng):
    n = across // spec.pitch
    offset = (across - n * spec.pitch) // 2 + (spec.pitch - spec.line_width) // 2
    a = offset + spec.pitch * np.arange(n)
    left = np.broadcast_to(a, (along, n)).astype(np.int64)
    right = left + spec.line_width
    if spec.edge_roughness_sigma > 0:
        space = spec.pitch - spec.line_width
        lim_out = max((space - 1) // 2, 0)
        lim_in = max((spec.line_width - 1) // 2, 0)
        jit = np.rint(rng.normal(0.0, spec.edge_roughness_sigma,
                                 (along, n, 2))).astype(np.int64)
        left = left - np.clip(-jit[..., 0], -lim_in, lim_out)
        right = right + np.clip(jit[..., 1], -lim_in, lim_out)
        left = np.clip(left, 0, across)
        right = np.clip(right, 0, across)
    return np.ascontiguousarray(left), np.ascontiguousarray(right)


def _line_mask(left, right, across):
    cols = np.arange(across)
    m = np.zeros((left.shape[0], across), dtype=bool)
    for k in range(left.shape[1]):
        m |= (cols >= left[:, k:k + 1]) & (cols < right[:, k:k + 1])
    return m


def _frame_dims(spec, width, height):
    return (height, width) if spec.orientation == "vertical" else (width, height)


def render_pattern(spec: PatternSpec, width: int, height: int,
                   rng: np.random.Generator | None = None):
    """Render a defect-free pattern; returns ``(SemImage, line mask)``."""
    sample = _render(spec, width, height, rng, ProcessStep.ADI, "pattern")
    return sample.image, sample.clean_pattern_mask


def _render(spec, width, height, rng, step, image_id) -> GeneratedSample:
    spec.validate(width, height)
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(spec.seed))
    along, across = _frame_dims(spec, width, height)
    left, right = _line_edges(spec, along, across, rng)
    lines = _line_mask(left, right, across)
    canvas = np.where(lines, spec.line_intensity,
                      spec.space_intensity).astype(np.uint8)
    if spec.noise_sigma > 0:
        noise = rng.normal(0.0, spec.noise_sigma, (along, across))
    else:
        noise = np.zeros((along, across))
    image = SemImage(image_id, step,
                     _to_image_frame(_compose(canvas, noise), spec.orientation))
    clean = InstanceMask.from_array(_to_image_frame(lines, spec.orientation))
    return GeneratedSample(image, (), clean, spec, canvas, noise, left, right,
                           np.zeros(canvas.shape, dtype=bool))


def new_sample(spec: PatternSpec, width: int, height: int,
               step=ProcessStep.ADI, image_id="sample",
               rng: np.random.Generator | None = None) -> GeneratedSample:
    """Defect-free sample ready for :func:`inject_defect`."""
    return _render(spec, width, height, rng, ProcessStep.parse(step), image_id)


# ------------------------------------------------------------- geometries

def _blend(spec, severity):
    return int(np.rint(spec.line_intensity
                       + severity * (spec.space_intensity - spec.line_intensity)))


def _check_lines(n_lines, *ks):
    for k in ks:
        if not 0 <= k < n_lines:
            raise PlacementError(f"line index {k} outside 0..{n_lines - 1}")


def _check_rows(along, r0, r1):
    if r0 < 0 or r1 > along or r0 >= r1:
        raise PlacementError(f"rows [{r0}, {r1}) outside 0..{along}")


def _line_spans(left, right, k, r0, r1):
    return [(r, int(left[r, k]), int(right[r, k])) for r in range(r0, r1)]


def _space_spans(left, right, k, r0, r1, widths=None):
    """Space between line k and k+1, optionally only ``widths`` px from k."""
    out = []
    for r in range(r0, r1):
        a, b = int(right[r, k]), int(left[r, k + 1])
        if widths is not None:
            b = min(a + int(widths[r - r0]), b)
        out.append((r, a, b))
    return out


def _geometry(sample: GeneratedSample, d: DefectSpec):
    """Row spans ``(row, col0, col1)`` in the vertical frame and their value."""
    spec = sample.spec
    along = sample.canvas.shape[0]
    left, right, n = sample.left, sample.right, sample.n_lines
    k, v = int(d.anchor[0]), int(d.anchor[1])
    e = int(d.extent)
    name = d.defect_class.name
    value = spec.line_intensity
    if name in ("gap", "probable_gap"):
        _check_lines(n, k)
        _check_rows(along, v, v + e)
        spans = _line_spans(left, right, k, v, v + e)
        if name == "gap":
            if d.severity != 1.0:
                raise ParameterError("a gap is a full break (severity 1)")
            value = spec.space_intensity
        else:
            if d.severity >= 1.0:
                raise ParameterError("probable gap needs severity < 1")
            value = _blend(spec, d.severity)
    elif name in ("bridge", "single_bridge", "thin_bridge"):
        e = 1 if name == "thin_bridge" else e
        _check_lines(n, k, k + 1)
        _check_rows(along, v, v + e)
        spans = _space_spans(left, right, k, v, v + e)
    elif name == "microbridge":
        e = min(e, 2)
        _check_lines(n, k, k + 1)
        _check_rows(along, v, v + e)
        widths = []
        for r in range(v, v + e):
            space = int(left[r, k + 1] - right[r, k])
            widths.append(min(max(1, int(d.severity * space)), space - 1))
        if min(widths) < 1:
            raise PlacementError("space too narrow for a micro bridge")
        spans = _space_spans(left, right, k, v, v + e, widths)
    elif name == "multi_bridge_h":
        _check_lines(n, k, k + d.span)
        _check_rows(along, v, v + e)
        spans = []
        for j in range(d.span):
            spans += _space_spans(left, right, k + j, v, v + e)
    elif name == "multi_bridge_nh":
        _check_lines(n, k, k + d.span)
        step = 2 * e
        _check_rows(along, v, v + step * (d.span - 1) + e)
        spans = []
        for j in range(d.span):
            r0 = v + j * step
            spans += _space_spans(left, right, k + j, r0, r0 + e)
    elif name == "line_collapse":
        _check_lines(n, k, k + 1)
        _check_rows(along, v, v + e)
        spans = []
        for r in range(v, v + e):
            a, b = int(right[r, k]), int(left[r, k + 1])
            half = math.ceil((b - a) / 2)
            t = math.sin(math.pi * (r - v + 0.5) / e)
            disp = min(half, math.ceil(2 * half * t))
            if 2 * disp >= b - a:
                spans.append((r, a, b))
            else:
                spans += [(r, a, a + disp), (r, b - disp, b)]
    else:  # pragma: no cover - DefectClass validates names
        raise ParameterError(f"no geometry for {name}")
    return [sp for sp in spans if sp[2] > sp[1]], value


def _span_bbox(spans, orientation):
    r0 = min(s[0] for s in spans)
    r1 = max(s[0] for s in spans) + 1
    c0 = min(s[1] for s in spans)
    c1 = max(s[2] for s in spans)
    if orientation == "horizontal":
        return BBox(r0, c0, r1, c1)
    return BBox(c0, r0, c1, r1)


def inject_defect(sample: GeneratedSample, spec: DefectSpec) -> GeneratedSample:
    """Return a copy of ``sample`` with one more defect and its exact truth."""
    if spec.defect_class.step is not sample.image.step:
        raise ParameterError("defect class does not match the sample's step")
    spans, value = _geometry(sample, spec)
    changed = []
    for r, a, b in spans:
        # the whole footprint counts, not just the pixels that change value
        if sample.occupied[r, a:b].any():
            raise PlacementError("defect overlaps an existing defect")
        cols = a + np.flatnonzero(sample.canvas[r, a:b] != value)
        if cols.size:
            changed.append((np.full(cols.size, r), cols))
    if not changed:
        raise PlacementError("defect changes no pixels")
    rows = np.concatenate([c[0] for c in changed])
    cols = np.concatenate([c[1] for c in changed])
    canvas = sample.canvas.copy()
    canvas[rows, cols] = value
    occupied = sample.occupied.copy()
    occupied[rows, cols] = True
    orient = sample.spec.orientation
    region = np.zeros(canvas.shape, dtype=bool)
    region[rows, cols] = True
    mask = InstanceMask.from_array(_to_image_frame(region, orient))
    bbox = _span_bbox([(r, c, c + 1) for r, c in
                       ((rows.min(), cols.min()), (rows.max(), cols.max()))],
                      orient)
    inst = DefectInstance(spec.defect_class, bbox, mask)
    px = sample.image.pixels.copy()
    new_vals = _compose(canvas[rows, cols], sample.noise[rows, cols])
    if orient == "horizontal":
        px[cols, rows] = new_vals
    else:
        px[rows, cols] = new_vals
    image = SemImage(sample.image.id, sample.image.step, px)
    return replace(sample, image=image, truth=sample.truth + (inst,),
                   canvas=canvas, occupied=occupied)


def measure_snr(sample: GeneratedSample) -> float:
    """Nominal contrast divided by the residual noise standard deviation."""
    lines = sample.clean_pattern_mask.to_array()
    px = sample.image.pixels.astype(np.float64)
    contrast = abs(px[lines].mean() - px[~lines].mean())
    resid = px - sample.noiseless().astype(np.float64)
    sd = resid.std()
    return float("inf") if sd == 0 else float(contrast / sd)


# ---------------------------------------------------------------- datasets

@dataclass(frozen=True)
class PatternRanges:
    """Closed ranges from which each image's PatternSpec is drawn."""

    pitch: tuple[int, int]
    line_fraction: tuple[float, float] = (0.45, 0.55)
    orientations: tuple[str, ...] = ("vertical",)
    line_intensity: tuple[int, int] = (190, 210)
    space_intensity: tuple[int, int] = (50, 70)
    edge_roughness_sigma: float = 0.0
    noise_sigma: float = 0.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "PatternRanges":
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)

    def sample(self, rng, seed: int) -> PatternSpec:
        pitch = int(rng.integers(self.pitch[0], self.pitch[1] + 1))
        frac = float(rng.uniform(*self.line_fraction))
        lw = min(max(1, int(round(pitch * frac))), pitch - 1)
        orient = self.orientations[int(rng.integers(len(self.orientations)))]
        li = int(rng.integers(self.line_intensity[0], self.line_intensity[1] + 1))
        si = int(rng.integers(self.space_intensity[0],
                              self.space_intensity[1] + 1))
        return PatternSpec(pitch, lw, orient, li, si, self.edge_roughness_sigma,
                           self.noise_sigma, seed)


PATTERN_PRESETS = {
    # ADI: lower contrast, heavier noise and rougher edges than AEI
    ProcessStep.ADI: PatternRanges(
        pitch=(28, 36), line_intensity=(140, 160), space_intensity=(80, 100),
        edge_roughness_sigma=0.4, noise_sigma=20.0),
    ProcessStep.AEI: PatternRanges(
        pitch=(24, 32), line_intensity=(190, 210), space_intensity=(50, 70),
        edge_roughness_sigma=0.3, noise_sigma=6.0),
}


@dataclass(frozen=True)
class GenConfig:
    """Everything generate_dataset needs; mirrors the config-file schema."""

    step: ProcessStep
    n_images: int
    seed: int = 0
    class_mix: Mapping[str, float] | None = None
    pattern: PatternRanges | None = None
    count_range: tuple[int, int] | None = None
    p_empty: float | None = None
    size: tuple[int, int] | None = None

    def resolved(self) -> "GenConfig":
        step = ProcessStep.parse(self.step)
        lo_hi = self.count_range or ((0, 40) if step is ProcessStep.ADI
                                     else (0, 1))
        p_empty = self.p_empty
        if p_empty is None:
            # ADI: uniform over 0..40; AEI: 129 of 131 validation images
            p_empty = (1.0 / (lo_hi[1] - lo_hi[0] + 1)
                       if step is ProcessStep.ADI else 2.0 / 131.0)
        mix = self.class_mix or DEFAULT_CLASS_MIX[step]
        mix = {canonical_class_name(k): float(v) for k, v in mix.items()}
        return GenConfig(step, int(self.n_images), int(self.seed), mix,
                         self.pattern or PATTERN_PRESETS[step],
                         tuple(lo_hi), float(p_empty),
                         tuple(self.size or DEFAULT_IMAGE_SIZE[step]))

    @classmethod
    def from_dict(cls, d: Mapping) -> "GenConfig":
        d = dict(d)
        if d.get("pattern") is not None and not isinstance(d["pattern"],
                                                           PatternRanges):
            d["pattern"] = PatternRanges.from_dict(d["pattern"])
        for k in ("count_range", "size"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        d["step"] = ProcessStep.parse(d["step"])
        return cls(**d)

    def to_dict(self) -> dict:
        c = self.resolved()
        out = asdict(c)
        out["step"] = c.step.value
        out["pattern"] = asdict(c.pattern)
        return _jsonable(out)


def _jsonable(o):
    if isinstance(o, dict):
        return {k: _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    return o


def allocate_quota(weights: Mapping[str, float], total: int) -> dict[str, int]:
    """Largest-remainder split of ``total`` proportional to ``weights``."""
    names = list(weights)
    w = np.array([weights[n] for n in names], dtype=np.float64)
    if (w < 0).any() or w.sum() <= 0:
        raise ParameterError("class weights must be nonnegative, not all zero")
    exact = w / w.sum() * total
    base = np.floor(exact).astype(int)
    rem = total - int(base.sum())
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rem]] += 1
    return dict(zip(names, base.tolist()))


def plan_dataset(cfg: GenConfig) -> list[list[str]]:
    """Per-image class lists; realized totals follow the mix to within 1."""
    cfg = cfg.resolved()
    if cfg.n_images < 0:
        raise ParameterError("n_images must be >= 0")
    for name in cfg.class_mix:
        if name not in CLASS_NAMES[cfg.step]:
            raise ParameterError(f"class {name!r} not admissible for "
                                 f"{cfg.step.value}")
    allocate_quota(cfg.class_mix, 0)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(cfg.seed, spawn_key=(_PLAN_KEY,))))
    lo, hi = cfg.count_range
    lo_nz = max(lo, 1)
    counts = []
    for _ in range(cfg.n_images):
        if hi == 0 or rng.random() < cfg.p_empty:
            counts.append(0)
        else:
            counts.append(int(rng.integers(lo_nz, hi + 1)))
    quota = allocate_quota(cfg.class_mix, sum(counts))
    pool = [n for n, q in quota.items() for _ in range(q)]
    rng.shuffle(pool)
    plan, pos = [], 0
    for c in counts:
        plan.append(pool[pos:pos + c])
        pos += c
    return plan


# Defect parameter draws per class: (extent range, severity range, span range)
_DEFECT_PARAMS = {
    "gap": ((8, 24), (1.0, 1.0), (2, 2)),
    "probable_gap": ((8, 24), (0.6, 0.85), (2, 2)),
    "bridge": ((3, 8), (1.0, 1.0), (2, 2)),
    "single_bridge": ((3, 8), (1.0, 1.0), (2, 2)),
    "thin_bridge": ((1, 1), (1.0, 1.0), (2, 2)),
    "microbridge": ((2, 2), (0.4, 0.75), (2, 2)),
    "multi_bridge_h": ((3, 8), (1.0, 1.0), (2, 3)),
    "multi_bridge_nh": ((3, 6), (1.0, 1.0), (2, 2)),
    "line_collapse": ((40, 90), (1.0, 1.0), (2, 2)),
}

_LINES_USED = {"gap": 0, "probable_gap": 0, "multi_bridge_h": None,
               "multi_bridge_nh": None}


def _draw_defect(cls: DefectClass, sample: GeneratedSample, rng) -> DefectSpec:
    (e0, e1), (s0, s1), (p0, p1) = _DEFECT_PARAMS[cls.name]
    extent = int(rng.integers(e0, e1 + 1))
    severity = float(rng.uniform(s0, s1)) if s1 > s0 else s0
    span = int(rng.integers(p0, p1 + 1))
    extra = _LINES_USED.get(cls.name, 1)
    if extra is None:
        extra = span
    along = sample.canvas.shape[0]
    length = extent
    if cls.name == "multi_bridge_nh":
        length = 2 * extent * (span - 1) + extent
    k = int(rng.integers(0, sample.n_lines - extra))
    v = int(rng.integers(2, along - length - 2))
    return DefectSpec(cls, (k, v), extent, severity, span)


def generate_sample(step, classes: Sequence[str], pattern: PatternRanges,
                    size: tuple[int, int], seed: int, index: int,
                    image_id: str, clearance: int | None = None,
                    max_tries: int = 200) -> GeneratedSample:
    """One dataset image: pattern draw, then rejection-placed defects.

    Defects keep ``clearance`` pixels (default one pitch) between their
    boxes so that separate defects stay separable.
    """
    step = ProcessStep.parse(step)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(seed, spawn_key=(index,))))
    spec = pattern.sample(rng, seed)
    sample = _render(spec, size[0], size[1], rng, step, image_id)
    gap = spec.pitch if clearance is None else clearance
    boxes: list[BBox] = []
    for name in classes:
        cls = DefectClass(step, name)
        for _ in range(max_tries):
            d = _draw_defect(cls, sample, rng)
            try:
                spans, _ = _geometry(sample, d)
                if not spans:
                    continue
                box = _span_bbox(spans, spec.orientation).dilate(gap)
                if any(box.intersection_area(b) for b in boxes):
                    continue
                sample = inject_defect(sample, d)
            except PlacementError:
                continue
            boxes.append(sample.truth[-1].bbox)
            break
        else:
            log.warning("%s: could not place %s after %d tries", image_id,
                        name, max_tries)
    return sample


def _generate_one(args):
    step, classes, pattern, size, seed, index, image_id, out_dir = args
    sample = generate_sample(step, classes, pattern, size, seed, index,
                             image_id)
    if out_dir is not None:
        write_png(sample.image, Path(out_dir) / "images" / f"{image_id}.png")
    return sample.truth


def image_id_for(step, index: int) -> str:
    return f"{ProcessStep.parse(step).value.lower()}_{index:05d}"


def generate_dataset(step, n_images: int, class_mix=None,
                     pattern: PatternRanges | None = None, out_dir=None,
                     seed: int = 0, workers: int = 1,
                     **kwargs) -> DatasetManifest:
    """Generate ``n_images`` images plus a ground-truth manifest.

    Writes ``out_dir/images/*.png`` and ``out_dir/manifest.json`` when
    ``out_dir`` is given. Extra keyword arguments go to :class:`GenConfig`.
    """
    cfg = GenConfig(ProcessStep.parse(step), n_images, seed, class_mix,
                    pattern, **kwargs).resolved()
    plan = plan_dataset(cfg)
    if out_dir is not None:
        out = Path(out_dir)
        try:
            (out / "images").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot write to {out}: {exc}") from exc
    ids = [image_id_for(cfg.step, i) for i in range(cfg.n_images)]
    jobs = [(cfg.step, plan[i], cfg.pattern, cfg.size, cfg.seed, i, ids[i],
             out_dir) for i in range(cfg.n_images)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            truths = list(ex.map(_generate_one, jobs))
    else:
        truths = [_generate_one(j) for j in jobs]
    w, h = cfg.size
    images = tuple(ImageRecord(i, f"images/{i}.png", w, h) for i in ids)
    anns = tuple((i, t) for i, ts in zip(ids, truths) for t in ts)
    info = {"seed": cfg.seed, "generator": "adcds.synthgen",
            "config": cfg.to_dict()}
    manifest = DatasetManifest(cfg.step, images, anns, info)
    if out_dir is not None:
        save_manifest(manifest, Path(out_dir) / "manifest.json")
    return manifest


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
