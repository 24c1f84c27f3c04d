"""Detection stage: SemImage in, ranked class/box/confidence triples out.

Backends are plain callables registered by name. The shipped ``grid``
backend is a classical grid-deviation detector:

1. binarize (lines are the bright class);
2. estimate the ideal line-space grid from the projection onto the axis
   across the lines;
3. deviation raster = binarized image XOR ideal grid;
4. 4-connected deviation components of at least ``min_component_area``
   pixels, grouped when their boxes lie within ``merge_gap`` of each other;
5. rule-based classification of each group;
6. confidence = deviation area / ``calibration``, clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import kernels
from .core import BBox, DefectClass, DefectInstance, ProcessStep, SemImage
from .errors import ConfigError


@dataclass(frozen=True)
class DetectorConfig:
    step: ProcessStep = ProcessStep.ADI
    backend: str = "grid"
    confidence_floor: float = 0.7
    max_detections: int = 100
    binarization: str = "otsu"
    min_component_area: int = 6
    # confidence normaliser; None means 2 * min_component_area
    calibration: float | None = None
    # None: derived from the estimated line width / pitch
    merge_gap: int | None = None
    collapse_min_extent: int | None = None
    gap_contrast: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "step", ProcessStep.parse(self.step))
        if not 0.0 <= self.confidence_floor <= 1.0:
            raise ConfigError("confidence_floor must lie in [0, 1]")
        if self.max_detections < 1:
            raise ConfigError("max_detections must be >= 1")
        if self.binarization not in ("otsu", "otsu_box3"):
            raise ConfigError(f"unknown binarization {self.binarization!r}")
        if self.min_component_area < 1:
            raise ConfigError("min_component_area must be >= 1")
        if self.calibration is not None and self.calibration <= 0:
            raise ConfigError("calibration must be positive")

    @classmethod
    def preset(cls, step, **overrides) -> "DetectorConfig":
        step = ProcessStep.parse(step)
        if step is ProcessStep.ADI:
            base = cls(step, max_detections=100, binarization="otsu_box3",
                       min_component_area=8, calibration=16.0)
        else:
            base = cls(step, max_detections=5, binarization="otsu",
                       min_component_area=6, calibration=12.0)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["step"] = self.step.value
        return d

    @classmethod
    def from_dict(cls, d) -> "DetectorConfig":
        return cls(**d)


@dataclass(frozen=True)
class Detection:
    instance: DefectInstance
    # deviation pixel count behind the confidence
    anomaly_mass: float = 0.0

    @property
    def confidence(self) -> float:
        return self.instance.confidence

    @property
    def defect_class(self) -> DefectClass:
        return self.instance.defect_class

    @property
    def bbox(self) -> BBox:
        return self.instance.bbox


class DetectionList(list):
    """List of detections plus an optional diagnostic (degraded mode)."""

    def __init__(self, items=(), diagnostic: str | None = None):
        super().__init__(items)
        self.diagnostic = diagnostic

    @property
    def degraded(self) -> bool:
        return self.diagnostic is not None


BACKENDS: dict[str, Callable[[SemImage, DetectorConfig], DetectionList]] = {}


def register_backend(name: str):
    def deco(fn):
        BACKENDS[name] = fn
        return fn
    return deco


def rank_key(det: Detection):
    b = det.bbox
    return (-det.confidence, det.defect_class.id, b.y_min, b.x_min)


def filter_by_confidence(dets, floor: float) -> list[Detection]:
    return [d for d in dets if d.confidence >= floor]


def to_roi_seed(dets) -> list[tuple[DefectClass, BBox]]:
    return [(d.defect_class, d.bbox) for d in dets]


def detect_candidates(image: SemImage, config: DetectorConfig) -> DetectionList:
    """All candidates, ranked, before gating and truncation."""
    if image.step is not config.step:
        raise ConfigError(f"detector configured for {config.step.value}, "
                          f"image is {image.step.value}")
    try:
        backend = BACKENDS[config.backend]
    except KeyError:
        raise ConfigError(f"unknown detector backend {config.backend!r}") \
            from None
    cands = backend(image, config)
    out = DetectionList(sorted(cands, key=rank_key),
                        getattr(cands, "diagnostic", None))
    return out


def detect(image: SemImage, config: DetectorConfig) -> DetectionList:
    cands = detect_candidates(image, config)
    kept = filter_by_confidence(cands, config.confidence_floor)
    return DetectionList(kept[:config.max_detections], cands.diagnostic)


# ------------------------------------------------------- grid backend

def binarize_bright(px: np.ndarray, method: str) -> np.ndarray:
    """Boolean raster of the bright class."""
    if method == "otsu_box3":
        s = kernels.box3_sum(px)
        return s > kernels.otsu_threshold(s, 9 * 255 + 1)
    return px > kernels.otsu_threshold(px, 256)


def estimate_orientation(binary: np.ndarray) -> str:
    tx = np.count_nonzero(binary[:, 1:] != binary[:, :-1])
    ty = np.count_nonzero(binary[1:, :] != binary[:-1, :])
    return "vertical" if tx >= ty else "horizontal"


@dataclass
class Grid:
    """Ideal grid in the vertical frame: alternating line/space column runs."""

    line_cols: np.ndarray     # bool per column
    run_start: np.ndarray
    run_end: np.ndarray
    run_is_line: np.ndarray
    col_run: np.ndarray       # run index per column
    pitch: float
    line_width: float


def estimate_grid(binary_v: np.ndarray, min_lines: int = 3,
                  max_period_cv: float = 0.2) -> Grid | None:
    """Ideal grid from the column profile; None when no periodicity."""
    line_cols = binary_v.mean(axis=0) > 0.5
    padded = np.concatenate(([~line_cols[0]], line_cols))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts = edges
    ends = np.append(edges[1:], line_cols.size)
    is_line = line_cols[starts]
    line_starts = starts[is_line]
    if line_starts.size < min_lines:
        return None
    periods = np.diff(line_starts)
    # ignore clipped runs at the image border when judging regularity
    widths = (ends - starts)[is_line]
    inner = widths[1:-1] if widths.size > 2 else widths
    if periods.size == 0 or periods.mean() < 3:
        return None
    if periods.std() > max_period_cv * periods.mean():
        return None
    col_run = np.repeat(np.arange(starts.size), ends - starts)
    return Grid(line_cols, starts, ends, is_line, col_run,
                float(np.median(periods)), float(np.median(inner)))


def _group(stats, keep, gap):
    """Union components whose boxes lie within ``gap`` px in both axes."""
    idx = np.flatnonzero(keep)
    _, y0, x0, y1, x1 = (a[idx] for a in stats)
    dy = np.maximum(y0[:, None], y0[None, :]) - np.minimum(y1[:, None],
                                                           y1[None, :])
    dx = np.maximum(x0[:, None], x0[None, :]) - np.minimum(x1[:, None],
                                                           x1[None, :])
    close = (dy <= gap) & (dx <= gap)
    parent = list(range(idx.size))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in zip(*np.nonzero(np.triu(close, 1))):
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(idx.size):
        groups.setdefault(find(i), []).append(int(idx[i]))
    return list(groups.values())


def _classify(step, grid: Grid, gm, sub_px, x0e, y_extent, levels, config):
    """Rule-based class for one grouped deviation region (vertical frame)."""
    line_level, space_level = levels
    g_sub = grid.line_cols[x0e:x0e + gm.shape[1]]
    miss = gm & g_sub
    extra = gm & ~g_sub
    n_miss = int(miss.sum())
    n_extra = int(extra.sum())
    runs = np.unique(grid.col_run[x0e:x0e + gm.shape[1]])
    adi = step is ProcessStep.ADI

    if n_miss > n_extra:
        if not adi:
            return "line_collapse"
        contrast = line_level - space_level
        drop = (line_level - float(sub_px[miss].mean())) / contrast \
            if contrast > 0 else 1.0
        return "gap" if drop >= config.gap_contrast else "probable_gap"

    spaces = []
    for r in runs:
        if grid.run_is_line[r]:
            continue
        c0 = grid.run_start[r] - x0e
        c1 = grid.run_end[r] - x0e
        cols = extra[:, c0:c1]
        if cols.sum() < 3:
            continue
        fill = cols.sum(axis=1) / max(c1 - c0, 1)
        # majority-filled rows only: reattached edge pixels would smear
        # the vertical extent and make staggered bridges look aligned
        rows = np.flatnonzero(fill >= 0.5)
        if rows.size == 0:
            rows = np.flatnonzero(cols.any(axis=1))
        spaces.append((int(r), int((fill >= 0.8).sum()), rows.min(), rows.max()))
    if len(spaces) >= 2:
        if adi:
            return "bridge"
        aligned = all(a[2] <= b[3] and b[2] <= a[3]
                      for a, b in zip(spaces, spaces[1:]))
        return "multi_bridge_h" if aligned else "multi_bridge_nh"
    full_rows = spaces[0][1] if spaces else 0
    collapse_len = config.collapse_min_extent or int(round(grid.pitch))
    if full_rows == 0:
        if adi:
            return "microbridge"
        return "single_bridge"
    if y_extent >= collapse_len:
        return "line_collapse"
    if adi:
        return "bridge"
    return "thin_bridge" if full_rows <= 1 else "single_bridge"


@register_backend("grid")
def grid_backend(image: SemImage, config: DetectorConfig) -> DetectionList:
    px = image.pixels
    binary = binarize_bright(px, config.binarization)
    orient = estimate_orientation(binary)
    if orient == "horizontal":
        binary, px = binary.T, px.T
    grid = estimate_grid(binary)
    if grid is None:
        return DetectionList([], "grid estimation failed: no periodicity")
    dev = binary ^ grid.line_cols[None, :]
    # one column either side of every ideal edge: line-edge roughness lives
    # here, so components are seeded from the deviation outside this band
    band = np.zeros(grid.line_cols.size, dtype=bool)
    edges = grid.run_start[1:]
    band[edges] = True
    band[edges - 1] = True
    core = dev & ~band[None, :]
    labels, n = kernels.label4(core)
    if n == 0:
        return DetectionList([])
    stats = kernels.component_stats(labels, n)
    keep = stats[0] >= config.min_component_area
    if not keep.any():
        return DetectionList([])
    gap = config.merge_gap if config.merge_gap is not None \
        else int(round(grid.line_width)) + 4
    colmean = px.mean(axis=0)
    levels = (float(colmean[grid.line_cols].mean()),
              float(colmean[~grid.line_cols].mean()))
    calib = config.calibration or default_calibration(config)
    area, y0, x0, y1, x1 = stats
    width = grid.line_cols.size
    out = []
    for members in _group(stats, keep, gap):
        m = np.array(members)
        gy0, gy1 = int(y0[m].min()), int(y1[m].max())
        gx0, gx1 = int(x0[m].min()), int(x1[m].max())
        # widen to whole grid runs so line/space coverage is measurable
        x0e = int(grid.run_start[grid.col_run[max(gx0 - 1, 0)]])
        x1e = int(grid.run_end[grid.col_run[min(gx1, width - 1)]])
        gm = np.isin(labels[gy0:gy1, x0e:x1e], m + 1)
        # re-attach band pixels bordering the core
        lo, hi = max(gx0 - 1, 0) - x0e, min(gx1 + 1, width) - x0e
        win = dev[gy0:gy1, x0e:x1e] & band[None, x0e:x1e]
        win[:, :lo] = False
        win[:, hi:] = False
        gm |= win
        name = _classify(image.step, grid, gm, px[gy0:gy1, x0e:x1e], x0e,
                         gy1 - gy0, levels, config)
        rows = np.flatnonzero(gm.any(axis=1))
        cols = np.flatnonzero(gm.any(axis=0))
        by0, by1 = gy0 + int(rows[0]), gy0 + int(rows[-1]) + 1
        bx0, bx1 = x0e + int(cols[0]), x0e + int(cols[-1]) + 1
        mass = float(area[m].sum())
        conf = min(1.0, mass / calib)
        if orient == "horizontal":
            box = BBox(by0, bx0, by1, bx1)
        else:
            box = BBox(bx0, by0, bx1, by1)
        inst = DefectInstance(DefectClass(image.step, name), box, None, conf)
        out.append(Detection(inst, mass))
    return DetectionList(out)


def calibrate_confidence(images, config: DetectorConfig,
                         percentile: float = 95.0) -> float:
    """Normaliser from defect-free images: percentile of candidate mass.

    Falls back to :func:`default_calibration` when no candidate survives,
    which is the usual outcome for the shipped presets.
    """
    cfg = replace(config, calibration=1e12, confidence_floor=0.0)
    masses = []
    for im in images:
        masses.extend(d.anomaly_mass for d in detect_candidates(im, cfg))
    if not masses:
        return default_calibration(config)
    return float(max(np.percentile(masses, percentile),
                     config.min_component_area))


def default_calibration(config: DetectorConfig) -> float:
    """Twice the area floor: a component at the floor scores 0.5."""
    return 2.0 * config.min_component_area
