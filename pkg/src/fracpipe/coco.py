"""COCO-format datasets: parsing, validation, label merging, filtering and splits.

A :class:`Dataset` is an immutable value. Every transform returns a new
dataset; the input is never modified.

Per-image extremity / image-level label / tags are read from an optional
``"metadata"`` object on each image record::

    {"id": 1, "file_name": "a.png", "width": 512, "height": 512,
     "metadata": {"extremity": "hand", "image_label": "fracture", "tags": ["cast"]}}
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box, ImageBounds, expand_with_margin

logger = logging.getLogger(__name__)

EXTREMITIES = ("hand", "wrist", "unknown")
IMAGE_LABELS = ("fracture", "normal", "unknown")
NORMAL_LABEL = "Normal"
BOUNDS_TOLERANCE = 1.0


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    """Malformed COCO document."""


class IntegrityError(DatasetError):
    """Referential-integrity or invariant violation.

    ``offending_id`` carries the id that broke the dataset.
    """

    def __init__(self, message: str, offending_id: Any = None):
        super().__init__(message)
        self.offending_id = offending_id


class AmbiguousMergeError(DatasetError):
    pass


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    supercategory: str | None = None
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int
    extremity: str = "unknown"
    image_label: str = "unknown"
    tags: tuple[str, ...] = ()
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def bounds(self) -> ImageBounds:
        return ImageBounds(self.width, self.height)


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: Box
    area: float
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...] = ()
    annotations: tuple[Annotation, ...] = ()
    categories: tuple[Category, ...] = ()
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        _validate(self)

    @cached_property
    def image_index(self) -> dict[int, ImageRecord]:
        return {im.id: im for im in self.images}

    @cached_property
    def category_index(self) -> dict[int, Category]:
        return {c.id: c for c in self.categories}

    @cached_property
    def category_by_name(self) -> dict[str, Category]:
        return {c.name: c for c in self.categories}

    def annotations_for(self, image_id: int) -> list[Annotation]:
        return self._annotations_by_image.get(image_id, [])

    @cached_property
    def _annotations_by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = defaultdict(list)
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return dict(out)

    def category_name(self, category_id: int) -> str:
        return self.category_index[category_id].name

    def category_counts(self) -> dict[int, int]:
        counts = Counter(a.category_id for a in self.annotations)
        return {c.id: counts.get(c.id, 0) for c in self.categories}


def _validate(d: Dataset) -> None:
    seen: set = set()
    for im in d.images:
        if im.id in seen:
            raise IntegrityError(f"duplicate image id {im.id}", im.id)
        seen.add(im.id)
        if im.width <= 0 or im.height <= 0:
            raise IntegrityError(f"image {im.id} has non-positive size", im.id)
        if im.extremity not in EXTREMITIES:
            raise IntegrityError(f"image {im.id} has unknown extremity {im.extremity!r}", im.id)
        if im.image_label not in IMAGE_LABELS:
            raise IntegrityError(f"image {im.id} has unknown label {im.image_label!r}", im.id)
    cat_ids: set = set()
    for c in d.categories:
        if c.id in cat_ids:
            raise IntegrityError(f"duplicate category id {c.id}", c.id)
        if not c.name:
            raise IntegrityError(f"category {c.id} has an empty name", c.id)
        cat_ids.add(c.id)
    images = {im.id: im for im in d.images}
    ann_ids: set = set()
    for a in d.annotations:
        if a.id in ann_ids:
            raise IntegrityError(f"duplicate annotation id {a.id}", a.id)
        ann_ids.add(a.id)
        im = images.get(a.image_id)
        if im is None:
            raise IntegrityError(
                f"annotation {a.id} references missing image id {a.image_id}", a.image_id
            )
        if a.category_id not in cat_ids:
            raise IntegrityError(
                f"annotation {a.id} references missing category id {a.category_id}",
                a.category_id,
            )
        if a.area < 0:
            raise IntegrityError(f"annotation {a.id} has negative area", a.id)
        b = a.bbox
        tol = BOUNDS_TOLERANCE
        if b.x < -tol or b.y < -tol or b.x2 > im.width + tol or b.y2 > im.height + tol:
            raise IntegrityError(f"annotation {a.id} bbox lies outside image {im.id}", a.id)


# --------------------------------------------------------------------------- parsing

_IMAGE_KEYS = {"id", "file_name", "width", "height", "metadata"}
_ANN_KEYS = {"id", "image_id", "category_id", "bbox", "area"}
_CAT_KEYS = {"id", "name", "supercategory"}


def _require(obj: Mapping, key: str, where: str):
    try:
        return obj[key]
    except (KeyError, TypeError):
        raise ParseError(f"{where} is missing required field {key!r}") from None


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ParseError(f"{where} must be an integer, got {value!r}")
    return int(value)


def _parse_image(obj) -> ImageRecord:
    if not isinstance(obj, dict):
        raise ParseError(f"image entry is not an object: {obj!r}")
    image_id = _as_int(_require(obj, "id", "image"), "image id")
    where = f"image {image_id}"
    meta = obj.get("metadata") or {}
    if not isinstance(meta, dict):
        raise ParseError(f"{where} metadata is not an object")
    extra = {k: v for k, v in obj.items() if k not in _IMAGE_KEYS}
    meta_extra = {k: v for k, v in meta.items() if k not in ("extremity", "image_label", "tags")}
    if meta_extra:
        extra["__metadata__"] = meta_extra
    return ImageRecord(
        id=image_id,
        file_name=str(obj.get("file_name", "")),
        width=_as_int(_require(obj, "width", where), f"{where} width"),
        height=_as_int(_require(obj, "height", where), f"{where} height"),
        extremity=str(meta.get("extremity", "unknown")),
        image_label=str(meta.get("image_label", "unknown")),
        tags=tuple(str(t) for t in meta.get("tags", ())),
        extra=extra,
    )


def _parse_annotation(obj) -> Annotation:
    if not isinstance(obj, dict):
        raise ParseError(f"annotation entry is not an object: {obj!r}")
    ann_id = _as_int(_require(obj, "id", "annotation"), "annotation id")
    where = f"annotation {ann_id}"
    raw_box = _require(obj, "bbox", where)
    try:
        bbox = Box.from_xywh(raw_box)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where} has an invalid bbox {raw_box!r}: {exc}") from None
    area = obj.get("area")
    area = bbox.area if area is None else float(area)
    return Annotation(
        id=ann_id,
        image_id=_as_int(_require(obj, "image_id", where), f"{where} image_id"),
        category_id=_as_int(_require(obj, "category_id", where), f"{where} category_id"),
        bbox=bbox,
        area=area,
        extra={k: v for k, v in obj.items() if k not in _ANN_KEYS},
    )


def _parse_category(obj) -> Category:
    if not isinstance(obj, dict):
        raise ParseError(f"category entry is not an object: {obj!r}")
    cat_id = _as_int(_require(obj, "id", "category"), "category id")
    name = _require(obj, "name", f"category {cat_id}")
    sup = obj.get("supercategory")
    return Category(
        id=cat_id,
        name=str(name),
        supercategory=None if sup is None else str(sup),
        extra={k: v for k, v in obj.items() if k not in _CAT_KEYS},
    )


def parse_dataset(document: str | bytes) -> Dataset:
    """Parse and validate a COCO annotation document.

    Raises:
        ParseError: the document is not valid JSON or lacks required fields.
        IntegrityError: dangling references, duplicate ids or out-of-bounds boxes.
    """
    try:
        raw = json.loads(document)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"malformed COCO document: {exc}") from None
    if not isinstance(raw, dict):
        raise ParseError("COCO document must be a JSON object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(raw.get(key), list):
            raise ParseError(f"COCO document is missing the {key!r} array")
    by_id = lambda r: r.id
    # records are held in id order, the same order serialize_dataset writes
    return Dataset(
        images=tuple(sorted((_parse_image(o) for o in raw["images"]), key=by_id)),
        annotations=tuple(sorted((_parse_annotation(o) for o in raw["annotations"]), key=by_id)),
        categories=tuple(sorted((_parse_category(o) for o in raw["categories"]), key=by_id)),
        extra={k: v for k, v in raw.items() if k not in ("images", "annotations", "categories")},
    )


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


def _image_to_obj(im: ImageRecord) -> dict:
    extra = dict(im.extra)
    meta_extra = extra.pop("__metadata__", {})
    obj = {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
    obj.update(sorted(extra.items()))
    meta = {"extremity": im.extremity, "image_label": im.image_label}
    if im.tags:
        meta["tags"] = list(im.tags)
    meta.update(sorted(meta_extra.items()))
    obj["metadata"] = meta
    return obj


def _annotation_to_obj(a: Annotation) -> dict:
    obj = {
        "id": a.id,
        "image_id": a.image_id,
        "category_id": a.category_id,
        "bbox": [float(v) for v in a.bbox.as_list()],
        "area": float(a.area),
    }
    obj.update(sorted(a.extra.items()))
    return obj


def _category_to_obj(c: Category) -> dict:
    obj: dict[str, Any] = {"id": c.id, "name": c.name}
    if c.supercategory is not None:
        obj["supercategory"] = c.supercategory
    obj.update(sorted(c.extra.items()))
    return obj


def serialize_dataset(d: Dataset) -> str:
    """Deterministic COCO text: records sorted by id, fixed key order."""
    doc: dict[str, Any] = dict(sorted(d.extra.items()))
    doc["images"] = [_image_to_obj(im) for im in sorted(d.images, key=lambda r: r.id)]
    doc["annotations"] = [_annotation_to_obj(a) for a in sorted(d.annotations, key=lambda r: r.id)]
    doc["categories"] = [_category_to_obj(c) for c in sorted(d.categories, key=lambda r: r.id)]
    return json.dumps(doc, indent=1, ensure_ascii=False) + "\n"


# --------------------------------------------------------------------------- transforms

@dataclass(frozen=True)
class MergeRule:
    pattern: str
    target: str

    def matches(self, name: str) -> bool:
        if "*" not in self.pattern:
            return name == self.pattern
        regex = ".*".join(re.escape(part) for part in self.pattern.split("*"))
        return re.fullmatch(regex, name) is not None


@dataclass(frozen=True)
class MergeMap:
    """Ordered ``pattern -> super-category`` rules; ``*`` matches any run of characters."""

    rules: tuple[MergeRule, ...] = ()

    def matching_rules(self, name: str) -> list[MergeRule]:
        return [r for r in self.rules if r.matches(name)]

    def target_for(self, name: str) -> str | None:
        hits = self.matching_rules(name)
        if not hits:
            return None
        targets = {r.target for r in hits}
        if len(targets) > 1:
            raise AmbiguousMergeError(
                f"category {name!r} matches rules for {sorted(targets)}"
            )
        return hits[0].target

    def validate(self, names: Iterable[str]) -> list[str]:
        """Names that hit more than one rule (first match would win)."""
        return [n for n in names if len(self.matching_rules(n)) > 1]


DEFAULT_MERGE_MAP = MergeMap(
    (
        MergeRule("* Metacarpal Fracture", "Metacarpal Fracture"),
        MergeRule("* Distal Phalanx Fracture", "Distal Phalanx Fracture"),
        MergeRule("* Middle Phalanx Fracture", "Middle Phalanx Fracture"),
        MergeRule("* Proximal Phalanx Fracture", "Proximal Phalanx Fracture"),
    )
)

_ARROW = re.compile(r"\s*(?:→|->)\s*")


def parse_merge_map(text: str) -> MergeMap:
    """Parse ``pattern -> target`` lines (``→`` also accepted); ``#`` starts a comment."""
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = _ARROW.split(line)
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ParseError(f"merge map line {lineno}: expected 'pattern -> target', got {line!r}")
        rules.append(MergeRule(parts[0].strip(), parts[1].strip()))
    return MergeMap(tuple(rules))


def merge_supercategories(d: Dataset, m: MergeMap) -> Dataset:
    """Collapse categories matched by ``m`` into their super-category.

    The super-category keeps its id if already present, otherwise it gets a
    fresh id above the current maximum. Annotation count is preserved.
    """
    if not m.rules:
        return d
    by_name = dict(d.category_by_name)
    next_id = max((c.id for c in d.categories), default=0) + 1
    remap: dict[int, int] = {}
    targets: dict[str, Category] = {}
    for cat in sorted(d.categories, key=lambda c: c.id):
        target = m.target_for(cat.name)
        if target is None or target == cat.name:
            continue
        if target not in targets:
            existing = by_name.get(target)
            if existing is not None and m.target_for(existing.name) in (None, target):
                targets[target] = existing
            else:
                targets[target] = Category(next_id, target, cat.supercategory)
                next_id += 1
        remap[cat.id] = targets[target].id
    if not remap:
        return d
    kept = [c for c in d.categories if c.id not in remap]
    kept_ids = {c.id for c in kept}
    kept.extend(t for t in targets.values() if t.id not in kept_ids)
    annotations = tuple(
        replace(a, category_id=remap[a.category_id]) if a.category_id in remap else a
        for a in d.annotations
    )
    return Dataset(d.images, annotations, tuple(sorted(kept, key=lambda c: c.id)), d.extra)


def filter_min_count(d: Dataset, min_count: int) -> Dataset:
    """Drop categories with fewer than ``min_count`` annotations (images are kept)."""
    if min_count < 0:
        raise ValueError("min_count must be non-negative")
    counts = d.category_counts()
    dropped = {cid for cid, n in counts.items() if n < min_count}
    if not dropped:
        return d
    return Dataset(
        d.images,
        tuple(a for a in d.annotations if a.category_id not in dropped),
        tuple(c for c in d.categories if c.id not in dropped),
        d.extra,
    )


def has_any_tag(*tags: str) -> Callable[[ImageRecord], bool]:
    """Predicate for :func:`exclude_images`, e.g. ``has_any_tag("cast", "hardware")``."""
    wanted = {t.lower() for t in tags}
    return lambda im: any(t.lower() in wanted for t in im.tags)


def exclude_images(d: Dataset, predicate: Callable[[ImageRecord], bool]) -> Dataset:
    """Remove images for which ``predicate`` is true, together with their annotations."""
    dropped = {im.id for im in d.images if predicate(im)}
    if not dropped:
        return d
    return Dataset(
        tuple(im for im in d.images if im.id not in dropped),
        tuple(a for a in d.annotations if a.image_id not in dropped),
        d.categories,
        d.extra,
    )


def round_half_up(value: float) -> int:
    return math.floor(value + 0.5)


def stratified_indices(
    labels: Sequence[str], train_fraction: float, rng: np.random.Generator
) -> tuple[list[int], list[int]]:
    """Per-label shuffled split; ``round_half_up(f * n)`` items of each label go to train."""
    if not (0.0 < train_fraction < 1.0):
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction!r}")
    groups: dict[str, list[int]] = defaultdict(list)
    for i, label in enumerate(labels):
        groups[label].append(i)
    train, val = [], []
    for label in sorted(groups):
        idx = groups[label]
        perm = [idx[j] for j in rng.permutation(len(idx))]
        n_train = 1 if len(idx) == 1 else round_half_up(train_fraction * len(idx))
        train.extend(perm[:n_train])
        val.extend(perm[n_train:])
    return sorted(train), sorted(val)


def stratified_split(d: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split annotations per category into train / validation.

    Each output carries the images its annotations reference, so an image can
    appear on both sides. Annotation-free images are split as their own
    strata (by image-level label) so that every image lands somewhere.
    """
    rng = np.random.default_rng(seed)
    anns = sorted(d.annotations, key=lambda a: a.id)
    labels = [d.category_name(a.category_id) for a in anns]
    train_idx, val_idx = stratified_indices(labels, train_fraction, rng)
    annotated = {a.image_id for a in anns}
    empty = sorted((im for im in d.images if im.id not in annotated), key=lambda im: im.id)
    e_train, e_val = stratified_indices([im.image_label for im in empty], train_fraction, rng)

    def build(ann_idx, empty_idx):
        chosen = [anns[i] for i in ann_idx]
        ids = {a.image_id for a in chosen} | {empty[i].id for i in empty_idx}
        images = tuple(im for im in d.images if im.id in ids)
        return Dataset(images, tuple(chosen), d.categories, d.extra)

    return build(train_idx, e_train), build(val_idx, e_val)


# --------------------------------------------------------------------------- crops

@dataclass(frozen=True)
class CropRecord:
    source_image_id: int
    crop_box: Box
    label: str


def extract_crop_manifest(d: Dataset, margin: float) -> tuple[list[CropRecord], list[int]]:
    """One margin-expanded crop per annotation.

    Returns:
        (records, skipped) where ``skipped`` lists ids of zero-area annotations.
    """
    records, skipped = [], []
    for a in sorted(d.annotations, key=lambda a: a.id):
        if a.bbox.area <= 0:
            skipped.append(a.id)
            continue
        bounds = d.image_index[a.image_id].bounds
        records.append(
            CropRecord(a.image_id, expand_with_margin(a.bbox, margin, bounds), d.category_name(a.category_id))
        )
    if skipped:
        logger.warning("skipped %d zero-area annotations: %s", len(skipped), skipped[:10])
    return records, skipped


def sample_normal_crops(
    d: Dataset,
    n: int,
    size_model: Sequence[tuple[float, float]],
    seed: int,
) -> list[CropRecord]:
    """Sample ``n`` crops labelled ``Normal`` from images whose label is normal.

    Sizes are resampled (with replacement) from ``size_model``, usually the
    ``(w, h)`` pairs of the fracture crops; a size larger than the chosen image
    is clamped to it. Positions are uniform over all placements that fit.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return []
    normals = sorted((im for im in d.images if im.image_label == "normal"), key=lambda im: im.id)
    if not normals:
        raise DatasetError("no images labelled normal to sample from")
    sizes = np.asarray(size_model, dtype=np.float64).reshape(-1, 2)
    if len(sizes) == 0:
        raise DatasetError("empty size model")
    rng = np.random.default_rng(seed)
    which = rng.integers(0, len(normals), size=n)
    pick = rng.integers(0, len(sizes), size=n)
    u = rng.random((n, 2))
    out = []
    for k in range(n):
        im = normals[which[k]]
        w = min(sizes[pick[k], 0], im.width)
        h = min(sizes[pick[k], 1], im.height)
        x = u[k, 0] * (im.width - w)
        y = u[k, 1] * (im.height - h)
        out.append(CropRecord(im.id, Box(float(x), float(y), float(w), float(h)), NORMAL_LABEL))
    return out


MANIFEST_COLUMNS = ("source_image_id", "x", "y", "w", "h", "label")


def write_crop_manifest(records: Iterable[CropRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in records:
        b = r.crop_box
        writer.writerow([r.source_image_id, repr(float(b.x)), repr(float(b.y)),
                         repr(float(b.w)), repr(float(b.h)), r.label])
    return buf.getvalue()


def read_crop_manifest(text: str) -> list[CropRecord]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return []
    if tuple(header) != MANIFEST_COLUMNS:
        raise ParseError(f"crop manifest header must be {','.join(MANIFEST_COLUMNS)}")
    out = []
    for lineno, row in enumerate(reader, 2):
        if not row:
            continue
        if len(row) != len(MANIFEST_COLUMNS):
            raise ParseError(f"crop manifest line {lineno}: expected 6 columns")
        try:
            out.append(CropRecord(int(row[0]), Box.from_xywh(row[1:5]), row[5]))
        except ValueError as exc:
            raise ParseError(f"crop manifest line {lineno}: {exc}") from None
    return out


# --------------------------------------------------------------------------- reports

@dataclass
class DistributionReport:
    category_counts: dict[str, int]
    category_percent: dict[str, float]
    extremity_counts: dict[str, dict[str, int]]
    total_annotations: int
    total_images: int

    def to_dict(self) -> dict:
        return {
            "total_images": self.total_images,
            "total_annotations": self.total_annotations,
            "categories": [
                {"name": k, "count": self.category_counts[k], "percent": self.category_percent[k]}
                for k in self.category_counts
            ],
            "extremity": self.extremity_counts,
        }

    def format(self) -> str:
        lines = [f"{'Extremity':<10}{'Fracture':>10}{'Normal':>10}"]
        for ext in ("hand", "wrist", "unknown"):
            row = self.extremity_counts.get(ext, {})
            if ext == "unknown" and not any(row.values()):
                continue
            lines.append(f"{ext.capitalize():<10}{row.get('fracture', 0):>10,}{row.get('normal', 0):>10,}")
        tot_f = sum(r.get("fracture", 0) for r in self.extremity_counts.values())
        tot_n = sum(r.get("normal", 0) for r in self.extremity_counts.values())
        lines.append(f"{'Combined':<10}{tot_f:>10,}{tot_n:>10,}")
        lines.append("")
        width = max([len("Pathology"), *map(len, self.category_counts)])
        lines.append(f"{'Pathology':<{width}}  {'Count':>8}  {'Percentage (%)':>14}")
        for name, count in self.category_counts.items():
            lines.append(f"{name:<{width}}  {count:>8}  {self.category_percent[name]:>14.2f}")
        return "\n".join(lines)


def label_distribution(labels: Iterable[str]) -> tuple[dict[str, int], dict[str, float]]:
    """Counts and percentages, sorted by count descending then name."""
    counts = Counter(labels)
    total = sum(counts.values())
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return (
        dict(ordered),
        {k: 100.0 * v / total for k, v in ordered},
    )


def distribution_report(d: Dataset, extra_labels: Iterable[str] = ()) -> DistributionReport:
    """Per-category annotation counts/percentages plus per-extremity image counts.

    ``extra_labels`` adds labels that are not annotations, e.g. ``Normal`` crops.
    """
    labels = [d.category_name(a.category_id) for a in d.annotations]
    labels.extend(extra_labels)
    counts, percent = label_distribution(labels)
    ext: dict[str, dict[str, int]] = {e: {"fracture": 0, "normal": 0} for e in ("hand", "wrist")}
    for im in d.images:
        row = ext.setdefault(im.extremity, {"fracture": 0, "normal": 0})
        if im.image_label in ("fracture", "normal"):
            row[im.image_label] += 1
    return DistributionReport(counts, percent, ext, len(labels), len(d.images))
