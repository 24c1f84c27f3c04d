"""Domain types, defect taxonomy and COCO-style file round-tripping.

Boxes are half-open pixel intervals: column ``x`` belongs to a box iff
``x_min <= x < x_max`` (likewise for rows). Masks are stored as column-major
foreground runs, the same order as uncompressed COCO RLE.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

from . import kernels
from .errors import (
    ImageFormatError,
    ManifestParseError,
    ReferentialIntegrityError,
    SchemaError,
    ShapeError,
)


class ProcessStep(str, Enum):
    ADI = "ADI"
    AEI = "AEI"

    @classmethod
    def parse(cls, value) -> "ProcessStep":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise SchemaError(f"unknown process step {value!r}") from None


# Registry order fixes the integer class ids (1-based, COCO style).
CLASS_NAMES = {
    ProcessStep.ADI: ("gap", "probable_gap", "bridge", "microbridge",
                      "line_collapse"),
    ProcessStep.AEI: ("multi_bridge_nh", "multi_bridge_h", "single_bridge",
                      "thin_bridge", "line_collapse"),
}

DISPLAY_NAMES = {
    "gap": "Gap",
    "probable_gap": "Probable gap",
    "bridge": "Bridge",
    "microbridge": "Microbridge",
    "line_collapse": "Line collapse",
    "multi_bridge_nh": "MBNH",
    "multi_bridge_h": "MBH",
    "single_bridge": "Single bridge",
    "thin_bridge": "Thin bridge",
}

_ALIASES = {
    "pgap": "probable_gap",
    "probablegap": "probable_gap",
    "micro_bridge": "microbridge",
    "linecollapse": "line_collapse",
    "collapse": "line_collapse",
    "mbnh": "multi_bridge_nh",
    "multibridgenh": "multi_bridge_nh",
    "mbh": "multi_bridge_h",
    "multibridgeh": "multi_bridge_h",
    "single": "single_bridge",
    "singlebridge": "single_bridge",
    "thin": "thin_bridge",
    "thinbridge": "thin_bridge",
}

DEFAULT_IMAGE_SIZE = {ProcessStep.ADI: (1024, 1024),
                      ProcessStep.AEI: (480, 480)}


def canonical_class_name(name: str) -> str:
    key = str(name).strip().lower().replace(" ", "_").replace("-", "_")
    if key in DISPLAY_NAMES:
        return key
    return _ALIASES.get(key.replace("_", ""), _ALIASES.get(key, key))


@dataclass(frozen=True, order=True)
class DefectClass:
    step: ProcessStep
    name: str

    def __post_init__(self):
        step = ProcessStep.parse(self.step)
        name = canonical_class_name(self.name)
        if name not in CLASS_NAMES[step]:
            raise SchemaError(
                f"class {self.name!r} is not admissible for {step.value}; "
                f"expected one of {CLASS_NAMES[step]}")
        object.__setattr__(self, "step", step)
        object.__setattr__(self, "name", name)

    @property
    def id(self) -> int:
        return CLASS_NAMES[self.step].index(self.name) + 1

    @property
    def display(self) -> str:
        return DISPLAY_NAMES[self.name]

    def __str__(self):
        return self.name


def classes_for(step) -> tuple[DefectClass, ...]:
    step = ProcessStep.parse(step)
    return tuple(DefectClass(step, n) for n in CLASS_NAMES[step])


def class_by_id(step, class_id: int) -> DefectClass:
    names = CLASS_NAMES[ProcessStep.parse(step)]
    if not 1 <= class_id <= len(names):
        raise SchemaError(f"unknown category id {class_id}")
    return DefectClass(step, names[class_id - 1])


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for f in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, f, int(getattr(self, f)))
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ShapeError(f"box {self.as_tuple()} has no area")

    @classmethod
    def from_xywh(cls, xywh) -> "BBox":
        x, y, w, h = (int(round(float(v))) for v in xywh)
        return cls(x, y, x + w, y + h)

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_xywh(self) -> list[int]:
        return [self.x_min, self.y_min, self.width, self.height]

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def intersection_area(self, other: "BBox") -> int:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        return max(w, 0) * max(h, 0)

    def within(self, width: int, height: int) -> bool:
        return (self.x_min >= 0 and self.y_min >= 0
                and self.x_max <= width and self.y_max <= height)

    def dilate(self, margin: int, width: int | None = None,
               height: int | None = None) -> "BBox":
        """Grow by ``margin`` on every side, clipped to the image if given."""
        x0, y0 = self.x_min - margin, self.y_min - margin
        x1, y1 = self.x_max + margin, self.y_max + margin
        if width is not None:
            x0, x1 = max(x0, 0), min(x1, width)
        if height is not None:
            y0, y1 = max(y0, 0), min(y1, height)
        return BBox(x0, y0, x1, y1)

    def slices(self):
        return slice(self.y_min, self.y_max), slice(self.x_min, self.x_max)


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """Binary raster stored as sorted, non-adjacent column-major runs."""

    width: int
    height: int
    starts: np.ndarray = field(repr=False)
    lengths: np.ndarray = field(repr=False)

    def __post_init__(self):
        starts = _frozen(self.starts, np.int64)
        lengths = _frozen(self.lengths, np.int64)
        if starts.shape != lengths.shape or starts.ndim != 1:
            raise ShapeError("starts and lengths must be 1-D of equal length")
        if lengths.size:
            ends = starts + lengths
            if (lengths <= 0).any() or (starts[1:] <= ends[:-1]).any() \
                    or starts[0] < 0 or ends[-1] > self.width * self.height:
                raise ShapeError("runs are not canonical")
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "lengths", lengths)

    @classmethod
    def from_array(cls, mask) -> "InstanceMask":
        m = np.asarray(mask, dtype=bool)
        if m.ndim != 2:
            raise ShapeError("mask must be 2-D")
        starts, lengths = kernels.rle_encode(m)
        return cls(m.shape[1], m.shape[0], starts, lengths)

    @classmethod
    def empty(cls, width: int, height: int) -> "InstanceMask":
        return cls(width, height, np.zeros(0), np.zeros(0))

    def to_array(self) -> np.ndarray:
        return kernels.rle_decode(self.starts, self.lengths, self.height,
                                  self.width)

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def area(self) -> int:
        return int(self.lengths.sum())

    def is_empty(self) -> bool:
        return self.lengths.size == 0

    def bbox(self) -> BBox | None:
        """Tight half-open bounding box, or None for an empty mask."""
        if self.is_empty():
            return None
        m = self.to_array()
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        return BBox(cols[0], rows[0], cols[-1] + 1, rows[-1] + 1)

    def to_coco(self) -> dict:
        """Uncompressed COCO RLE: alternating background/foreground counts."""
        counts = []
        pos = 0
        for s, n in zip(self.starts.tolist(), self.lengths.tolist()):
            counts.append(s - pos)
            counts.append(n)
            pos = s + n
        total = self.width * self.height
        if pos < total:
            counts.append(total - pos)
        return {"size": [self.height, self.width], "counts": counts}

    @classmethod
    def from_coco(cls, rle: Mapping) -> "InstanceMask":
        try:
            h, w = (int(v) for v in rle["size"])
            counts = [int(c) for c in rle["counts"]]
        except (KeyError, TypeError, ValueError):
            raise SchemaError(f"malformed RLE {rle!r}") from None
        if any(c < 0 for c in counts) or sum(counts) != h * w:
            raise SchemaError("RLE counts do not cover the raster exactly")
        starts, lengths = [], []
        pos = 0
        for i, c in enumerate(counts):
            if i % 2 == 1 and c > 0:
                if starts and starts[-1] + lengths[-1] == pos:
                    lengths[-1] += c
                else:
                    starts.append(pos)
                    lengths.append(c)
            pos += c
        return cls(w, h, starts, lengths)

    def __eq__(self, other):
        if not isinstance(other, InstanceMask):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and np.array_equal(self.starts, other.starts)
                and np.array_equal(self.lengths, other.lengths))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SemImage:
    id: str
    step: ProcessStep
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ImageFormatError(f"image {self.id!r} has no pixels")
        if px.dtype != np.uint8:
            if px.min() < 0 or px.max() > 255:
                raise ImageFormatError("pixel values outside [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", _frozen(px, np.uint8))
        object.__setattr__(self, "step", ProcessStep.parse(self.step))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class DefectInstance:
    defect_class: DefectClass
    bbox: BBox
    mask: InstanceMask | None = None
    confidence: float | None = None

    def __post_init__(self):
        if self.confidence is not None:
            c = float(self.confidence)
            if not 0.0 <= c <= 1.0:
                raise SchemaError(f"confidence {c} outside [0, 1]")
            object.__setattr__(self, "confidence", c)

    @property
    def is_prediction(self) -> bool:
        return self.confidence is not None

    def without_mask(self) -> "DefectInstance":
        return DefectInstance(self.defect_class, self.bbox, None,
                              self.confidence)


@dataclass(frozen=True)
class ImageRecord:
    id: str
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class DatasetManifest:
    """Images, annotations and the class registry of one process step.

    The same container holds ground truth (no confidences) and predictions
    (every annotation carries a confidence).
    """

    step: ProcessStep
    images: tuple[ImageRecord, ...] = ()
    annotations: tuple[tuple[str, DefectInstance], ...] = ()
    info: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        step = ProcessStep.parse(self.step)
        object.__setattr__(self, "step", step)
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(
            (str(i), a) for i, a in self.annotations))
        sizes = {}
        for rec in self.images:
            if rec.id in sizes:
                raise SchemaError(f"duplicate image id {rec.id!r}")
            sizes[rec.id] = (rec.width, rec.height)
        for image_id, inst in self.annotations:
            if image_id not in sizes:
                raise ReferentialIntegrityError(
                    f"annotation references unknown image id {image_id!r}")
            if inst.defect_class.step is not step:
                raise SchemaError(
                    f"class {inst.defect_class.name!r} belongs to "
                    f"{inst.defect_class.step.value}, manifest is {step.value}")
            w, h = sizes[image_id]
            if not inst.bbox.within(w, h):
                raise SchemaError(
                    f"bbox {inst.bbox.as_tuple()} outside image {image_id!r}")
            if inst.mask is not None and inst.mask.shape != (h, w):
                raise ShapeError(f"mask shape mismatch on image {image_id!r}")

    @property
    def categories(self) -> tuple[DefectClass, ...]:
        return classes_for(self.step)

    def class_counts(self) -> dict[str, int]:
        counts = {c.name: 0 for c in self.categories}
        for _, inst in self.annotations:
            counts[inst.defect_class.name] += 1
        return counts

    def by_image(self) -> dict[str, list[DefectInstance]]:
        out = {rec.id: [] for rec in self.images}
        for image_id, inst in self.annotations:
            out[image_id].append(inst)
        return out

    def image(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.id == image_id:
                return rec
        raise KeyError(image_id)

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (self.step is other.step
                and sorted(self.images, key=lambda r: r.id)
                == sorted(other.images, key=lambda r: r.id)
                and self.annotations == other.annotations)

    __hash__ = None


# ---------------------------------------------------------------- JSON I/O

_TOP_KEYS = {"info", "images", "annotations", "categories", "licenses"}
_IMAGE_KEYS = {"id", "file_name", "width", "height"}
_ANN_KEYS = {"id", "image_id", "category_id", "bbox", "area", "segmentation",
             "score", "confidence", "iscrowd"}
_CAT_KEYS = {"id", "name", "supercategory"}


def _warn_unknown(obj, known, where, seen):
    for k in obj:
        if k not in known and (where, k) not in seen:
            seen.add((where, k))
            warnings.warn(f"ignoring unknown {where} field {k!r}",
                          stacklevel=3)


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    info = dict(manifest.info)
    info["step"] = manifest.step.value
    anns = []
    for k, (image_id, inst) in enumerate(manifest.annotations, start=1):
        a = {
            "id": k,
            "image_id": image_id,
            "category_id": inst.defect_class.id,
            "bbox": inst.bbox.to_xywh(),
            "area": inst.mask.area if inst.mask is not None else inst.bbox.area,
            "iscrowd": 0,
        }
        if inst.mask is not None:
            a["segmentation"] = inst.mask.to_coco()
        if inst.confidence is not None:
            a["score"] = inst.confidence
        anns.append(a)
    return {
        "info": info,
        "images": [{"id": r.id, "file_name": r.file_name, "width": r.width,
                    "height": r.height} for r in manifest.images],
        "categories": [{"id": c.id, "name": c.name,
                        "supercategory": manifest.step.value}
                       for c in manifest.categories],
        "annotations": anns,
    }


def manifest_from_dict(data: Mapping) -> DatasetManifest:
    if not isinstance(data, Mapping):
        raise SchemaError("manifest root must be a JSON object")
    seen: set = set()
    _warn_unknown(data, _TOP_KEYS, "top-level", seen)
    info = dict(data.get("info") or {})
    cats = data.get("categories") or []
    step_value = info.get("step")
    if step_value is None:
        names = {canonical_class_name(c.get("name", "")) for c in cats}
        matches = [s for s in ProcessStep if names <= set(CLASS_NAMES[s])]
        if len(matches) != 1:
            raise SchemaError("cannot infer process step; set info.step")
        step_value = matches[0]
    step = ProcessStep.parse(step_value)

    cat_map = {}
    for c in cats:
        _warn_unknown(c, _CAT_KEYS, "category", seen)
        name = c.get("name")
        if canonical_class_name(name or "") not in CLASS_NAMES[step]:
            raise SchemaError(f"unknown class name {name!r} for {step.value}")
        cat_map[c.get("id")] = DefectClass(step, name)

    images = []
    for r in data.get("images") or []:
        _warn_unknown(r, _IMAGE_KEYS, "image", seen)
        try:
            images.append(ImageRecord(str(r["id"]), str(r.get("file_name", "")),
                                      int(r["width"]), int(r["height"])))
        except (KeyError, TypeError, ValueError):
            raise SchemaError(f"malformed image record {r!r}") from None

    annotations = []
    for a in data.get("annotations") or []:
        _warn_unknown(a, _ANN_KEYS, "annotation", seen)
        cid = a.get("category_id")
        if cid not in cat_map:
            if cats:
                raise SchemaError(f"annotation uses unknown category id {cid}")
            cat_map[cid] = class_by_id(step, int(cid))
        try:
            bbox = BBox.from_xywh(a["bbox"])
        except (KeyError, TypeError, ValueError, ShapeError) as exc:
            raise SchemaError(f"bad bbox in annotation {a.get('id')}: {exc}") \
                from None
        seg = a.get("segmentation")
        mask = InstanceMask.from_coco(seg) if isinstance(seg, Mapping) else None
        if seg is not None and not isinstance(seg, Mapping):
            raise SchemaError("only RLE segmentations are supported")
        score = a.get("score", a.get("confidence"))
        annotations.append((str(a.get("image_id")),
                            DefectInstance(cat_map[cid], bbox, mask, score)))
    return DatasetManifest(step, tuple(images), tuple(annotations), info)


def load_manifest(path) -> DatasetManifest:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
        data = json.loads(text)
    except UnicodeDecodeError as exc:
        raise ManifestParseError(f"invalid UTF-8 in {path}", exc.start) from None
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise ManifestParseError(f"malformed JSON in {path}: {exc.msg}",
                                 offset) from None
    return manifest_from_dict(data)


def dumps_json(obj) -> str:
    """Canonical JSON text used for every artifact (stable bytes)."""
    return json.dumps(obj, indent=1, sort_keys=False) + "\n"


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.write_text(dumps_json(manifest_to_dict(manifest)), encoding="utf-8")


# ------------------------------------------------------------- raster I/O

def import_image(path, step, image_id: str | None = None) -> SemImage:
    """Read an 8-bit grayscale PNG/PGM (colour input is luma-converted)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            fmt, mode = im.format, im.mode
            if fmt == "JPEG":
                warnings.warn(f"{path.name}: lossy JPEG input; pixel values "
                              "are not bit-stable", stacklevel=2)
            elif fmt not in ("PNG", "PPM"):
                raise ImageFormatError(f"{path.name}: unsupported format {fmt}")
            if mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise ImageFormatError(f"{path.name}: unsupported bit depth "
                                       f"(mode {mode})")
            if mode != "L":
                im = im.convert("L")
            px = np.asarray(im, dtype=np.uint8)
    except ImageFormatError:
        raise
    except (OSError, ValueError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from None
    if px.size == 0:
        raise ImageFormatError(f"{path}: zero-dimension image")
    return SemImage(image_id or path.stem, ProcessStep.parse(step), px)


def write_png(image: SemImage | np.ndarray, path) -> None:
    px = image.pixels if isinstance(image, SemImage) else np.asarray(image)
    Image.fromarray(np.ascontiguousarray(px, dtype=np.uint8), mode="L").save(
        path, format="PNG")

