"""Detector -> classifier fusion pipeline over pluggable backends.

Per image the stages run in a fixed order::

    detect -> score gate -> top-k truncation -> NMS -> margin crop -> classify
           -> drop crops labelled as normal -> labelled detections

Backends are duck-typed. A detector needs ``detect(ref) -> list[Detection]``
(and may offer ``detect_batch(refs)``); a classifier needs
``classify_batch(requests) -> list[Classification]``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import shlex
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Protocol, Sequence

import numpy as np

from . import imgproc
from .coco import NORMAL_LABEL, ParseError
from .geometry import Box, Detection, ImageBounds, expand_with_margin, nms
from .metrics import (
    ClassReport,
    DetEvalSummary,
    ImageLevelSummary,
    UndefinedMetricError,
    classification_report,
    evaluate_detections,
    image_level_eval,
    parse_results,
)

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-6
CROP_KEY_DECIMALS = 2
DEFAULT_TIMEOUT = 120.0


@dataclass(frozen=True)
class PipelineConfig:
    conf_threshold: float = 0.30
    nms_iou: float = 0.10
    crop_margin: float = 0.25
    discard_label: str = NORMAL_LABEL
    max_detections: int | None = 15

    def __post_init__(self):
        for name in ("conf_threshold", "nms_iou"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
        if self.crop_margin < 0:
            raise ValueError(f"crop_margin must be >= 0, got {self.crop_margin!r}")
        if self.max_detections is not None and self.max_detections < 1:
            raise ValueError(f"max_detections must be >= 1, got {self.max_detections!r}")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown pipeline config fields: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass(frozen=True)
class ImageRef:
    """Handle on one input image; ``path`` may be absent for fixture runs."""

    image_id: Hashable
    path: str | None = None
    width: int | None = None
    height: int | None = None


@dataclass(frozen=True)
class CropRequest:
    image_id: Hashable
    crop_box: Box
    pixels: np.ndarray | None = field(default=None, compare=False, repr=False)


class MalformedProbabilitiesError(ValueError):
    pass


@dataclass(frozen=True)
class Classification:
    label: str
    probabilities: Mapping[str, float]

    def __post_init__(self):
        total = sum(self.probabilities.values())
        if abs(total - 1.0) > PROBABILITY_TOLERANCE:
            raise MalformedProbabilitiesError(f"class probabilities sum to {total!r}, not 1")
        if self.label not in self.probabilities:
            raise MalformedProbabilitiesError(f"label {self.label!r} missing from probabilities")
        if self.probabilities[self.label] < max(self.probabilities.values()):
            raise MalformedProbabilitiesError(f"label {self.label!r} is not the argmax")

    @property
    def probability(self) -> float:
        return self.probabilities[self.label]


class DetectorBackend(Protocol):
    def detect(self, ref: ImageRef) -> list[Detection]: ...


class ClassifierBackend(Protocol):
    def classify_batch(self, requests: Sequence[CropRequest]) -> list[Classification]: ...


class BackendError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``image_id`` the input."""

    def __init__(self, stage: str, message: str, image_id: Hashable = None):
        prefix = f"[{stage}]" if image_id is None else f"[{stage}] image {image_id!r}:"
        super().__init__(f"{prefix} {message}")
        self.stage = stage
        self.image_id = image_id


@dataclass(frozen=True)
class LabeledDetection:
    box: Box
    score: float
    label: str
    probability: float
    crop_box: Box

    def to_dict(self) -> dict:
        return {
            "bbox": self.box.as_list(),
            "score": self.score,
            "label": self.label,
            "probability": self.probability,
            "crop_box": self.crop_box.as_list(),
        }


@dataclass(frozen=True)
class PipelineResult:
    image_id: Hashable
    detections: tuple[LabeledDetection, ...]
    raw_count: int
    below_threshold: int
    truncated: int
    nms_suppressed: int
    discarded_normal: int

    @property
    def surviving(self) -> int:
        return len(self.detections)

    def is_conserved(self) -> bool:
        return (
            self.below_threshold + self.truncated + self.nms_suppressed
            + self.discarded_normal + self.surviving
        ) == self.raw_count

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "detections": [d.to_dict() for d in self.detections],
            "counts": {
                "raw": self.raw_count,
                "below_threshold": self.below_threshold,
                "truncated": self.truncated,
                "nms_suppressed": self.nms_suppressed,
                "discarded_normal": self.discarded_normal,
                "surviving": self.surviving,
            },
        }


def _load(ref: ImageRef) -> tuple[np.ndarray | None, ImageBounds]:
    pixels = None
    if ref.path:
        try:
            pixels = imgproc.read_image(ref.path)
        except (OSError, ValueError) as exc:
            raise BackendError("load", f"unreadable image {ref.path!r}: {exc}", ref.image_id) from exc
        return pixels, ImageBounds(pixels.shape[1], pixels.shape[0])
    if ref.width is None or ref.height is None:
        raise BackendError("load", "no image path and no width/height given", ref.image_id)
    return None, ImageBounds(int(ref.width), int(ref.height))


def run_pipeline(
    ref: ImageRef,
    det: DetectorBackend,
    cls: ClassifierBackend,
    cfg: PipelineConfig = PipelineConfig(),
) -> PipelineResult:
    """Run every stage on one image and account for each raw detection."""
    pixels, bounds = _load(ref)
    try:
        raw = list(det.detect(ref))
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError("detector", str(exc), ref.image_id) from exc

    gated = [d for d in raw if d.score >= cfg.conf_threshold]
    below = len(raw) - len(gated)
    truncated = 0
    if cfg.max_detections is not None and len(gated) > cfg.max_detections:
        order = sorted(range(len(gated)), key=lambda i: -gated[i].score)
        gated = [gated[i] for i in order[: cfg.max_detections]]
        truncated = len(order) - cfg.max_detections
    kept = nms(gated, cfg.nms_iou)
    suppressed = len(gated) - len(kept)

    requests = []
    for d in kept:
        crop_box = expand_with_margin(d.box, cfg.crop_margin, bounds)
        crop_pixels = None
        if pixels is not None:
            snapped = imgproc.snap_box(crop_box, bounds.width, bounds.height)
            if snapped.w > 0 and snapped.h > 0:
                crop_pixels = imgproc.crop(pixels, snapped)
        requests.append(CropRequest(ref.image_id, crop_box, crop_pixels))
    try:
        labels = list(cls.classify_batch(requests)) if requests else []
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError("classifier", str(exc), ref.image_id) from exc
    if len(labels) != len(requests):
        raise BackendError(
            "classifier", f"returned {len(labels)} results for {len(requests)} crops", ref.image_id
        )

    out, discarded = [], 0
    for d, req, c in zip(kept, requests, labels):
        if c.label == cfg.discard_label:
            discarded += 1
            continue
        out.append(LabeledDetection(d.box, d.score, c.label, c.probability, req.crop_box))
    return PipelineResult(ref.image_id, tuple(out), len(raw), below, truncated, suppressed, discarded)


# --------------------------------------------------------------------------- file backends

class FileDetectorBackend:
    """Serves stored detections from a COCO results document."""

    thread_safe = True

    def __init__(self, detections: Mapping[Hashable, Sequence[Detection]]):
        self._dets = {k: tuple(v) for k, v in detections.items()}

    @classmethod
    def from_document(cls, document: str | bytes) -> "FileDetectorBackend":
        return cls(parse_results(document))

    def detect(self, ref: ImageRef) -> list[Detection]:
        return list(self._dets.get(ref.image_id, ()))


def file_detector_backend(document: str | bytes) -> FileDetectorBackend:
    return FileDetectorBackend.from_document(document)


def crop_key(image_id: Hashable, box: Box) -> tuple:
    return (image_id, tuple(round(float(v), CROP_KEY_DECIMALS) for v in box.as_list()))


class MissingCropError(KeyError):
    pass


def parse_classifications(document: str | bytes) -> dict[tuple, Classification]:
    """Parse ``[{image_id, crop_box: [x, y, w, h], label, probabilities: {...}}, ...]``."""
    try:
        raw = json.loads(document)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"malformed classifier document: {exc}") from None
    if not isinstance(raw, list):
        raise ParseError("classifier document must be a JSON array")
    table = {}
    for k, entry in enumerate(raw):
        try:
            key = crop_key(entry["image_id"], Box.from_xywh(entry["crop_box"]))
            probs = {str(name): float(p) for name, p in entry["probabilities"].items()}
            label = str(entry["label"])
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ParseError(f"classifier entry {k} is invalid: {exc}") from None
        table[key] = Classification(label, probs)
    return table


class FileClassifierBackend:
    """Looks crops up by ``(image_id, crop box rounded to 2 decimals)``."""

    thread_safe = True

    def __init__(self, table: Mapping[tuple, Classification]):
        self._table = dict(table)

    @classmethod
    def from_document(cls, document: str | bytes) -> "FileClassifierBackend":
        return cls(parse_classifications(document))

    def classify_batch(self, requests: Sequence[CropRequest]) -> list[Classification]:
        out = []
        for req in requests:
            key = crop_key(req.image_id, req.crop_box)
            try:
                out.append(self._table[key])
            except KeyError:
                raise MissingCropError(f"no stored classification for crop {key}") from None
        return out


def file_classifier_backend(document: str | bytes) -> FileClassifierBackend:
    return FileClassifierBackend.from_document(document)


def serialize_classifications(table: Mapping[tuple, Classification]) -> str:
    rows = [
        {"image_id": key[0], "crop_box": list(key[1]), "label": c.label,
         "probabilities": dict(c.probabilities)}
        for key, c in table.items()
    ]
    return json.dumps(rows, indent=1) + "\n"


# --------------------------------------------------------------------------- subprocess backend

class ExternalProcessBackend:
    """Bridges to an out-of-process model through files in ``interchange_dir``.

    Each batch writes ``request-NNNNN.json`` and runs ``command`` once, with
    ``{request}``, ``{output}`` and ``{dir}`` substituted. The command must
    write ``{output}`` as a COCO results document (detector) or a classifier
    document (classifier); the output is validated like the file backends.

    Request documents::

        {"kind": "detector", "images": [{"image_id", "path", "width", "height"}]}
        {"kind": "classifier", "crops": [{"image_id", "crop_box", "path"}]}

    Crop pixels, when available, are written as PGM files next to the request.
    """

    thread_safe = False

    def __init__(
        self,
        command: str | Sequence[str],
        interchange_dir,
        kind: str = "detector",
        timeout: float = DEFAULT_TIMEOUT,
    ):
        if kind not in ("detector", "classifier"):
            raise ValueError(f"kind must be 'detector' or 'classifier', got {kind!r}")
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("empty command")
        self.interchange_dir = os.fspath(interchange_dir)
        self.kind = kind
        self.timeout = timeout
        self.invocations = 0
        self._cache: dict[Hashable, list[Detection]] = {}
        self._lock = threading.Lock()

    def _invoke(self, request: dict) -> bytes:
        with self._lock:
            self.invocations += 1
            n = self.invocations
        os.makedirs(self.interchange_dir, exist_ok=True)
        req_path = os.path.join(self.interchange_dir, f"request-{n:05d}.json")
        out_path = os.path.join(self.interchange_dir, f"output-{n:05d}.json")
        with open(req_path, "w", encoding="utf-8") as fh:
            json.dump(request, fh, indent=1)
        subs = {"request": req_path, "output": out_path, "dir": self.interchange_dir}
        argv = [part.format(**subs) for part in self.command]
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=self.timeout)
        except FileNotFoundError as exc:
            raise BackendError(self.kind, f"cannot spawn {argv[0]!r}: {exc}") from exc
        except subprocess.TimeoutExpired:
            raise BackendError(self.kind, f"command timed out after {self.timeout}s") from None
        except OSError as exc:
            raise BackendError(self.kind, f"cannot spawn {argv[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            stderr = proc.stderr.decode(errors="replace").strip()
            raise BackendError(self.kind, f"command exited with status {proc.returncode}: {stderr}")
        try:
            with open(out_path, "rb") as fh:
                return fh.read()
        except OSError as exc:
            raise BackendError(self.kind, f"command wrote no output document: {exc}") from exc

    def detect_batch(self, refs: Sequence[ImageRef]) -> dict[Hashable, list[Detection]]:
        if self.kind != "detector":
            raise TypeError("this backend is configured as a classifier")
        request = {
            "kind": "detector",
            "images": [
                {"image_id": r.image_id, "path": r.path, "width": r.width, "height": r.height}
                for r in refs
            ],
        }
        try:
            dets = parse_results(self._invoke(request))
        except ParseError as exc:
            raise BackendError(self.kind, f"schema violation: {exc}") from exc
        out = {r.image_id: list(dets.get(r.image_id, ())) for r in refs}
        with self._lock:
            self._cache.update(out)
        return out

    def detect(self, ref: ImageRef) -> list[Detection]:
        with self._lock:
            if ref.image_id in self._cache:
                return list(self._cache[ref.image_id])
        return self.detect_batch([ref])[ref.image_id]

    def classify_batch(self, requests: Sequence[CropRequest]) -> list[Classification]:
        if self.kind != "classifier":
            raise TypeError("this backend is configured as a detector")
        with self._lock:
            batch = self.invocations + 1
        crops = []
        for k, req in enumerate(requests):
            path = None
            if req.pixels is not None:
                os.makedirs(self.interchange_dir, exist_ok=True)
                path = os.path.join(self.interchange_dir, f"crop-{batch:05d}-{k:04d}.pgm")
                imgproc.write_image(path, req.pixels)
            crops.append({"image_id": req.image_id, "crop_box": req.crop_box.as_list(), "path": path})
        try:
            table = parse_classifications(self._invoke({"kind": "classifier", "crops": crops}))
        except (ParseError, MalformedProbabilitiesError) as exc:
            raise BackendError(self.kind, f"schema violation: {exc}") from exc
        try:
            return FileClassifierBackend(table).classify_batch(requests)
        except MissingCropError as exc:
            raise BackendError(self.kind, f"schema violation: {exc}") from exc


def external_process_backend(command, interchange_dir, kind="detector", timeout=DEFAULT_TIMEOUT):
    return ExternalProcessBackend(command, interchange_dir, kind, timeout)


# --------------------------------------------------------------------------- corpus evaluation

@dataclass(frozen=True)
class CorpusEntry:
    image_id: Hashable
    path: str | None
    label: str
    width: int | None = None
    height: int | None = None

    @property
    def ref(self) -> ImageRef:
        return ImageRef(self.image_id, self.path, self.width, self.height)


def _coerce_id(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return text


def parse_manifest(text: str, base_dir: str | None = None) -> list[CorpusEntry]:
    """Parse a ``image_id,path,label`` CSV manifest (header required).

    ``path`` may be empty when image sizes come from a ground-truth document.
    Relative paths resolve against ``base_dir``.
    """
    reader = csv.DictReader(io.StringIO(text))
    required = {"image_id", "path", "label"}
    if reader.fieldnames is None or not required <= set(reader.fieldnames):
        raise ParseError("manifest header must contain image_id, path, label")
    entries, seen = [], set()
    for lineno, row in enumerate(reader, 2):
        image_id = _coerce_id(row["image_id"] or "")
        if image_id == "":
            raise ParseError(f"manifest line {lineno}: empty image_id")
        if image_id in seen:
            raise ParseError(f"manifest line {lineno}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        label = (row["label"] or "").strip().lower()
        if label not in ("fracture", "normal"):
            raise ParseError(f"manifest line {lineno}: label must be fracture or normal, got {label!r}")
        path = (row["path"] or "").strip() or None
        if path and base_dir and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        entries.append(CorpusEntry(image_id, path, label))
    return entries


@dataclass
class CorpusEvaluation:
    detection: DetEvalSummary | None
    image_level: ImageLevelSummary
    classification: ClassReport
    results: dict[Hashable, PipelineResult]
    failures: dict[Hashable, str]

    def summary(self) -> dict:
        doc = {
            "image_level": self.image_level.to_dict(),
            "classification": self.classification.to_dict(),
            "failures": {str(k): v for k, v in self.failures.items()},
        }
        if self.detection is not None:
            doc["detection"] = self.detection.to_dict()
        return doc


def evaluate_corpus(
    entries: Sequence[CorpusEntry],
    det: DetectorBackend,
    cls: ClassifierBackend,
    cfg: PipelineConfig = PipelineConfig(),
    gt_boxes: Mapping[Hashable, Sequence[Box]] | None = None,
    workers: int = 1,
) -> CorpusEvaluation:
    """Run the pipeline on every image and score survivors.

    Images whose pipeline fails are recorded in ``failures`` and left out of
    every metric. AP is computed when any ground-truth box is present.
    """
    gt_boxes = gt_boxes or {}
    refs = [e.ref for e in entries]
    failures: dict[Hashable, str] = {}
    if hasattr(det, "detect_batch") and refs:
        try:
            det.detect_batch(refs)
        except BackendError as exc:
            failures.update({r.image_id: str(exc) for r in refs})

    def one(ref: ImageRef):
        try:
            return run_pipeline(ref, det, cls, cfg)
        except BackendError as exc:
            return exc

    todo = [r for r in refs if r.image_id not in failures]
    serial = workers <= 1 or not (
        getattr(det, "thread_safe", False) and getattr(cls, "thread_safe", False)
    )
    if serial:
        outcomes = [one(r) for r in todo]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, todo))

    results: dict[Hashable, PipelineResult] = {}
    for ref, outcome in zip(todo, outcomes):
        if isinstance(outcome, BackendError):
            failures[ref.image_id] = str(outcome)
            logger.warning("%s", outcome)
        else:
            results[ref.image_id] = outcome

    ok = [e for e in entries if e.image_id in results]
    labels = {e.image_id: e.label for e in ok}
    surviving = {k: r.surviving for k, r in results.items()}
    image_summary = image_level_eval(labels, surviving)
    predicted = ["fracture" if surviving[e.image_id] else "normal" for e in ok]
    report = classification_report([e.label for e in ok], predicted, ("fracture", "normal"))

    detection = None
    gts = {e.image_id: list(gt_boxes.get(e.image_id, ())) for e in ok}
    if any(gts.values()):
        dets = {
            k: [Detection(d.box, d.score) for d in r.detections] for k, r in results.items()
        }
        try:
            detection = evaluate_detections(dets, gts, conf_threshold=cfg.conf_threshold)
        except UndefinedMetricError:
            detection = None
    ordered = {e.image_id: results[e.image_id] for e in ok}
    failed = {e.image_id: failures[e.image_id] for e in entries if e.image_id in failures}
    return CorpusEvaluation(detection, image_summary, report, ordered, failed)
