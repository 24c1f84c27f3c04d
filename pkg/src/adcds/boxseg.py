"""Box-supervised instance segmentation and mask refinement.

Each ROI is segmented from the pixels of its dilated box alone:

1. rows of the dilated box that lie outside the tight box (measured along
   the pattern lines) give a per-column reference profile of the intact
   pattern;
2. the deviation of every crop pixel from that reference is thresholded;
3. connected components that reach the tight box and are not confined to
   the crop's outer ring form the mask.

Nothing here reads annotation masks; the only inputs are an image, ROI
boxes and a :class:`SegConfig`.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, replace
from typing import Mapping, Sequence, Union

import numpy as np

from . import kernels
from .core import BBox, DefectInstance, InstanceMask, \
    ProcessStep, SemImage
from .detect import binarize_bright, estimate_orientation
from .errors import ConfigError, DegenerateROIError, ParameterError, \
    ROIError, ShapeError

_POLARITY_ALIASES = {"auto": "auto", "dark": "dark", "defect-dark": "dark",
                     "bright": "bright", "defect-bright": "bright"}
THRESHOLDS = ("otsu", "midpoint")
BINARIZATIONS = ("otsu", "otsu_box3")


@dataclass(frozen=True)
class SegConfig:
    box_dilation: int = 2
    local_threshold: str = "otsu"
    polarity: str = "auto"
    refine_passes: int = 2
    neighborhood: int = 8
    # None: apply and_refine on ADI images only
    and_refine: bool | None = None
    binarization: str = "otsu"
    presmooth: bool = False
    orientation: str = "auto"

    def __post_init__(self):
        if self.box_dilation < 0:
            raise ConfigError("box_dilation must be >= 0")
        if self.refine_passes < 0:
            raise ConfigError("refine_passes must be >= 0")
        if self.neighborhood not in (4, 8):
            raise ConfigError("neighborhood must be 4 or 8")
        if self.local_threshold not in THRESHOLDS:
            raise ConfigError(f"unknown local_threshold "
                              f"{self.local_threshold!r}")
        if self.binarization not in BINARIZATIONS:
            raise ConfigError(f"unknown binarization {self.binarization!r}")
        if self.orientation not in ("auto", "vertical", "horizontal"):
            raise ConfigError(f"unknown orientation {self.orientation!r}")
        try:
            pol = _POLARITY_ALIASES[self.polarity]
        except KeyError:
            raise ConfigError(f"unknown polarity {self.polarity!r}") from None
        object.__setattr__(self, "polarity", pol)

    @classmethod
    def preset(cls, step) -> "SegConfig":
        step = ProcessStep.parse(step)
        if step is ProcessStep.ADI:
            # 4-neighbourhood: the 8-majority erodes rectangle corners, so
            # clean masks would not survive refinement unchanged
            return cls(refine_passes=2, neighborhood=4, and_refine=True,
                       binarization="otsu_box3", presmooth=True)
        return cls(refine_passes=0, and_refine=False)

    def applies_and_refine(self, step: ProcessStep) -> bool:
        if self.and_refine is None:
            return step is ProcessStep.ADI
        return self.and_refine

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping, step=None) -> "SegConfig":
        base = cls.preset(step) if step is not None else cls()
        unknown = set(d) - set(base.to_dict())
        if unknown:
            raise ConfigError(f"unknown segmentation options: "
                              f"{sorted(unknown)}")
        return replace(base, **dict(d))


@dataclass(frozen=True)
class SegResult:
    instance: DefectInstance
    refined: bool = False
    diagnostic: str | None = None
    polarity: str | None = None

    @property
    def mask(self) -> InstanceMask:
        return self.instance.mask


Roi = Union[tuple, DefectInstance]


def _unpack_roi(roi: Roi):
    if isinstance(roi, DefectInstance):
        return roi.defect_class, roi.bbox, roi.confidence
    if len(roi) == 2:
        return roi[0], roi[1], None
    cls, box, conf = roi
    return cls, box, conf


def _image_orientation(image: SemImage, config: SegConfig) -> str:
    if config.orientation != "auto":
        return config.orientation
    return estimate_orientation(binarize_bright(image.pixels, "otsu"))


def _clip(box: BBox, width: int, height: int) -> BBox | None:
    x0, y0 = max(box.x_min, 0), max(box.y_min, 0)
    x1, y1 = min(box.x_max, width), min(box.y_max, height)
    if x0 >= x1 or y0 >= y1:
        return None
    return BBox(x0, y0, x1, y1)


def _threshold(s: np.ndarray, crop: np.ndarray, method: str) -> np.ndarray:
    if method == "midpoint":
        q = np.rint(crop).astype(np.int64)
        lo = int(q.min())
        t = kernels.otsu_threshold(q - lo, int(q.max()) - lo + 1) + lo
        upper, lower = crop[q > t], crop[q <= t]
        c = float(upper.mean() - lower.mean()) if upper.size else 0.0
        return s > c / 2
    # Otsu on the signed deviation, quantized to half levels
    q = np.rint(2 * s).astype(np.int64)
    lo = int(q.min())
    t = kernels.otsu_threshold(q - lo, int(q.max()) - lo + 1) + lo
    return (q > t) & (s > 0)


def _segment_crop(crop: np.ndarray, tight: tuple[int, int, int, int],
                  config: SegConfig, raw: np.ndarray | None = None):
    """Foreground and polarity inside a vertical-frame crop.

    ``tight`` is ``(row0, row1, col0, col1)`` of the seed box in crop
    coordinates. With ``raw`` given, ``crop`` is a smoothed copy: it
    decides the mask interior while the one-pixel boundary band is re-read
    from the raw pixels, so smoothing does not round off defect corners.
    Raises DegenerateROIError when nothing deviates.
    """
    r0, r1, c0, c1 = tight
    if crop.min() == crop.max():
        raise DegenerateROIError("uniform ROI: zero variance")
    outside = np.ones(crop.shape[0], dtype=bool)
    outside[r0:r1] = False
    ref_rows = crop[outside] if outside.any() else crop
    ref = np.median(ref_rows, axis=0)[None, :]
    dev = crop - ref
    if not dev.any():
        raise DegenerateROIError("ROI matches the surrounding pattern")
    if config.polarity == "auto":
        polarity = "bright" if dev[r0:r1, c0:c1].mean() >= 0 else "dark"
    else:
        polarity = config.polarity
    s = dev if polarity == "bright" else -dev
    fg = _threshold(s, crop, config.local_threshold)

    labels, n = kernels.label4(fg)
    if n == 0:
        raise DegenerateROIError("no pixel passes the local threshold",
                                 None)
    hit = np.zeros(n + 1, dtype=bool)
    hit[np.unique(labels[r0:r1, c0:c1])] = True
    inner = np.zeros(n + 1, dtype=bool)
    inner[np.unique(labels[1:-1, 1:-1])] = True
    keep = hit & inner
    keep[0] = False
    mask = keep[labels]
    if raw is not None and mask.any():
        raw_rows = raw[outside] if outside.any() else raw
        raw_ref = np.median(raw_rows, axis=0)[None, :]
        mask = _snap_boundary(mask, s, raw, raw_ref, polarity)
    if not mask.any():
        raise DegenerateROIError("no component reaches the ROI interior")
    return mask, polarity


def _snap_boundary(mask, s, raw, ref, polarity):
    inner = mask.copy()
    inner[1:, :] &= mask[:-1, :]
    inner[:-1, :] &= mask[1:, :]
    inner[:, 1:] &= mask[:, :-1]
    inner[:, :-1] &= mask[:, 1:]
    grown = mask.copy()
    grown[1:, :] |= mask[:-1, :]
    grown[:-1, :] |= mask[1:, :]
    grown[:, 1:] |= mask[:, :-1]
    grown[:, :-1] |= mask[:, 1:]
    raw_s = raw - ref if polarity == "bright" else ref - raw
    half = float(s[mask].mean()) / 2
    return inner | (grown & ~inner & (raw_s > half))


def _empty_result(cls, box, conf, width, height, message):
    inst = DefectInstance(cls, box, InstanceMask.empty(width, height), conf)
    return SegResult(inst, False, message, None)


def _segment(image: SemImage, roi: Roi, config: SegConfig,
             orientation: str):
    """Full-frame boolean mask, dilated box, polarity and the seed fields."""
    cls, box, conf = _unpack_roi(roi)
    w, h = image.width, image.height
    tight = _clip(box, w, h)
    if tight is None:
        raise ROIError(f"ROI {box.as_tuple()} lies outside the "
                       f"{w}x{h} image")
    outer = tight.dilate(config.box_dilation, w, h)
    crop = image.pixels[outer.slices()]
    raw = crop.astype(np.float64)
    crop = kernels.box3_sum(crop) / 9.0 if config.presmooth else raw
    if not config.presmooth:
        raw = None
    loc = (tight.y_min - outer.y_min, tight.y_max - outer.y_min,
           tight.x_min - outer.x_min, tight.x_max - outer.x_min)
    try:
        if orientation == "horizontal":
            m, pol = _segment_crop(
                crop.T, (loc[2], loc[3], loc[0], loc[1]), config,
                None if raw is None else raw.T)
            m = m.T
        else:
            m, pol = _segment_crop(crop, loc, config, raw)
    except DegenerateROIError as exc:
        exc.result = _empty_result(cls, box, conf, w, h, str(exc))
        raise
    return m, outer, pol, (cls, box, conf)


def _to_full(local: np.ndarray, outer: BBox, width: int, height: int):
    full = np.zeros((height, width), dtype=bool)
    full[outer.slices()] = local
    return full


def segment_in_box(image: SemImage, roi: Roi,
                   config: SegConfig | None = None) -> SegResult:
    """Segment one ROI; ``roi`` is ``(class, bbox[, confidence])`` or a
    DefectInstance whose confidence is carried over."""
    config = config or SegConfig.preset(image.step)
    local, outer, pol, (cls, box, conf) = _segment(
        image, roi, config, _image_orientation(image, config))
    mask = InstanceMask.from_array(_to_full(local, outer, image.width,
                                            image.height))
    return SegResult(DefectInstance(cls, box, mask, conf), False, None, pol)


def _bright_raster(image: SemImage, method: str) -> np.ndarray | None:
    px = image.pixels
    if px.size == 0:
        raise ShapeError("empty image")
    if px.min() == px.max():
        return None
    return binarize_bright(px, method)


def binarize_image(image: SemImage, method: str = "otsu") -> InstanceMask:
    """Global binarization with the minority class as foreground.

    A constant image yields an empty mask and a RuntimeWarning.
    """
    if method not in BINARIZATIONS:
        raise ParameterError(f"unknown binarization {method!r}")
    bright = _bright_raster(image, method)
    if bright is None:
        warnings.warn("constant image: binarization is all background",
                      RuntimeWarning, stacklevel=2)
        return InstanceMask.empty(image.width, image.height)
    if 2 * int(bright.sum()) > bright.size:
        bright = ~bright
    return InstanceMask.from_array(bright)


def and_refine(pred: InstanceMask, image_binary: InstanceMask) -> InstanceMask:
    if pred.shape != image_binary.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs "
                         f"{image_binary.shape}")
    return InstanceMask.from_array(pred.to_array() & image_binary.to_array())


def _fill_window(arr: np.ndarray, passes: int, neighborhood: int):
    """Majority filter restricted to the foreground bbox plus one pixel.

    Exact: a pixel outside the bbox never has a foreground majority, so the
    region outside stays empty and zero padding matches the full raster.
    """
    rows = np.flatnonzero(arr.any(axis=1))
    if rows.size == 0:
        return arr.copy()
    cols = np.flatnonzero(arr.any(axis=0))
    y0, y1 = max(rows[0] - 1, 0), min(rows[-1] + 2, arr.shape[0])
    x0, x1 = max(cols[0] - 1, 0), min(cols[-1] + 2, arr.shape[1])
    out = np.zeros_like(arr, dtype=bool)
    out[y0:y1, x0:x1] = kernels.majority_filter(
        np.ascontiguousarray(arr[y0:y1, x0:x1]), passes, neighborhood)
    return out


def neighbor_fill(mask: InstanceMask, passes: int,
                  neighborhood: int = 8) -> InstanceMask:
    """Synchronous majority vote over the neighbourhood; ties keep."""
    if passes < 0:
        raise ParameterError("passes must be >= 0")
    if neighborhood not in (4, 8):
        raise ParameterError("neighborhood must be 4 or 8")
    if passes == 0 or mask.is_empty():
        return mask
    return InstanceMask.from_array(
        _fill_window(mask.to_array(), passes, neighborhood))


def segment_pipeline(image: SemImage, rois: Sequence[Roi],
                     config: SegConfig | None = None) -> list[SegResult]:
    """segment_in_box, then and_refine (ADI by default), then neighbor_fill.

    Per-ROI failures become empty-mask results with a diagnostic. If
    refinement would erase a mask, the unrefined mask is kept.
    """
    config = config or SegConfig.preset(image.step)
    if not rois:
        return []
    w, h = image.width, image.height
    orientation = _image_orientation(image, config)
    use_and = config.applies_and_refine(image.step)
    bright = _bright_raster(image, config.binarization) if use_and else None

    results = []
    for roi in rois:
        try:
            local, outer, pol, (cls, box, conf) = _segment(
                image, roi, config, orientation)
        except DegenerateROIError as exc:
            results.append(exc.result)
            continue
        except ROIError as exc:
            cls, box, conf = _unpack_roi(roi)
            results.append(_empty_result(cls, box, conf, w, h, str(exc)))
            continue
        refined = local
        if use_and:
            # the binary layer is matched to the instance polarity, so a
            # dark defect is refined by the dark class and vice versa
            if bright is None:
                layer = np.zeros_like(local)
            else:
                layer = bright[outer.slices()]
                if pol == "dark":
                    layer = ~layer
            refined = refined & layer
        if config.refine_passes:
            refined = _fill_window(refined, config.refine_passes,
                                   config.neighborhood)
        diagnostic = None
        did_refine = use_and or config.refine_passes > 0
        if did_refine and not refined.any():
            refined, did_refine = local, False
            diagnostic = "refinement removed every pixel; unrefined mask kept"
        mask = InstanceMask.from_array(_to_full(refined, outer, w, h))
        results.append(SegResult(DefectInstance(cls, box, mask, conf),
                                 did_refine, diagnostic, pol))
    return results


__all__ = [
    "SegConfig", "SegResult", "segment_in_box", "binarize_image",
    "and_refine", "neighbor_fill", "segment_pipeline",
]
