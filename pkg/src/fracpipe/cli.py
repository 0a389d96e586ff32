"""``fracpipe`` command-line entry point.

Exit codes: 0 success, 1 other errors, 2 input integrity, 3 undefined metric,
4 partial pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import coco, imgproc, losses, metrics, pipeline
from .geometry import Box, ImageBounds

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INTEGRITY = 2
EXIT_UNDEFINED = 3
EXIT_PARTIAL = 4

RUN_CONFIG_VERSION = 1

log = logging.getLogger("fracpipe")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.code = code


def _read(path, mode="r"):
    try:
        with open(path, mode, **({} if "b" in mode else {"encoding": "utf-8"})) as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc


def _write(out_dir: str, name: str, content: str | bytes) -> str:
    path = os.path.join(out_dir, name)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    mode = "wb" if isinstance(content, bytes) else "w"
    with open(path, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
        fh.write(content)
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def _load_dataset(path) -> coco.Dataset:
    try:
        return coco.parse_dataset(_read(path, "rb"))
    except coco.DatasetError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INTEGRITY) from exc


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is outside [0, 1]")
    return value


# --------------------------------------------------------------------------- stats

def cmd_stats(args) -> int:
    d = _load_dataset(args.dataset)
    report = coco.distribution_report(d)
    print(report.format())
    if args.out:
        _write(args.out, "stats.json", _dump(report.to_dict()))
    return EXIT_OK


# --------------------------------------------------------------------------- prepare

def cmd_prepare(args) -> int:
    d = _load_dataset(args.dataset)
    if args.exclude_tag:
        before = len(d.images)
        d = coco.exclude_images(d, coco.has_any_tag(*args.exclude_tag))
        log.info("excluded %d images by tag", before - len(d.images))
    merge_map = coco.DEFAULT_MERGE_MAP
    if args.merge_map:
        try:
            merge_map = coco.parse_merge_map(_read(args.merge_map))
        except coco.ParseError as exc:
            raise CliError(f"{args.merge_map}: {exc}", EXIT_INTEGRITY) from exc
    multi = merge_map.validate(c.name for c in d.categories)
    if multi:
        log.warning("categories matching several merge rules: %s", multi)

    try:
        merged = coco.merge_supercategories(d, merge_map)
    except coco.AmbiguousMergeError as exc:
        raise CliError(str(exc), EXIT_INTEGRITY) from exc
    merges = {}
    for c in d.categories:
        target = merge_map.target_for(c.name)
        if target is not None and target != c.name:
            merges[c.name] = target
    before_counts = {merged.category_name(k): v for k, v in merged.category_counts().items()}
    filtered = coco.filter_min_count(merged, args.min_count)
    removed = {
        name: n for name, n in before_counts.items() if name not in filtered.category_by_name
    }

    all_crops, skipped = coco.extract_crop_manifest(filtered, args.margin)
    sizes = [(r.crop_box.w, r.crop_box.h) for r in all_crops]
    try:
        normals = coco.sample_normal_crops(filtered, args.normal_crops, sizes, args.seed)
    except coco.DatasetError as exc:
        raise CliError(str(exc), EXIT_INTEGRITY) from exc

    train, val = coco.stratified_split(filtered, args.split, args.seed)
    crops_train, _ = coco.extract_crop_manifest(train, args.margin)
    crops_val, _ = coco.extract_crop_manifest(val, args.margin)
    n_train, n_val = coco.stratified_indices(
        [coco.NORMAL_LABEL] * len(normals), args.split, np.random.default_rng([args.seed, 1])
    ) if normals else ([], [])
    crops_train += [normals[i] for i in n_train]
    crops_val += [normals[i] for i in n_val]

    final_labels = [r.label for r in all_crops] + [r.label for r in normals]
    counts, percent = coco.label_distribution(final_labels)
    train_counts, _ = coco.label_distribution(r.label for r in crops_train)
    val_counts, _ = coco.label_distribution(r.label for r in crops_val)
    report = {
        "seed": args.seed,
        "split_fraction": args.split,
        "min_count": args.min_count,
        "margin": args.margin,
        "merged": merges,
        "removed": removed,
        "skipped_zero_area": skipped,
        "n_pathologies": len([k for k in counts if k != coco.NORMAL_LABEL]),
        "distribution": [
            {"label": k, "count": counts[k], "percent": round(percent[k], 4),
             "train": train_counts.get(k, 0), "val": val_counts.get(k, 0)}
            for k in counts
        ],
    }
    out = args.out
    _write(out, "train.json", coco.serialize_dataset(train))
    _write(out, "val.json", coco.serialize_dataset(val))
    _write(out, "crops_train.csv", coco.write_crop_manifest(crops_train))
    _write(out, "crops_val.csv", coco.write_crop_manifest(crops_val))
    _write(out, "prep_report.json", _dump(report))
    print(f"{report['n_pathologies']} pathologies + {coco.NORMAL_LABEL}; "
          f"{len(crops_train)} train / {len(crops_val)} val crops -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- eval-det

def cmd_eval_det(args) -> int:
    gt = _load_dataset(args.gt)
    try:
        dets = metrics.parse_results(_read(args.results, "rb"))
    except coco.ParseError as exc:
        raise CliError(f"{args.results}: {exc}", EXIT_INTEGRITY) from exc
    gts = metrics.ground_truth_boxes(gt, per_category=args.per_category)
    try:
        summary = metrics.evaluate_detections(
            dets, gts, conf_threshold=args.conf, iou_threshold=args.iou, per_category=args.per_category
        )
    except metrics.UndefinedMetricError as exc:
        raise CliError(str(exc), EXIT_UNDEFINED) from exc
    doc = _dump(summary.to_dict())
    sys.stdout.write(doc)
    if args.out:
        _write(args.out, "det_summary.json", doc)
        _write(args.out, "det_summary.csv", metrics.detection_csv([(os.path.basename(args.results), summary)]))
    return EXIT_OK


# --------------------------------------------------------------------------- run

def load_run_config(path) -> dict:
    """Read and validate a run-config document; paths resolve against its directory."""
    try:
        doc = json.loads(_read(path))
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: malformed config: {exc}", EXIT_INTEGRITY) from exc
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config must be a JSON object", EXIT_INTEGRITY)
    if doc.get("schema_version") != RUN_CONFIG_VERSION:
        raise CliError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}", EXIT_INTEGRITY)
    allowed = {"schema_version", "pipeline", "paths", "seed", "merge_map", "split_fraction"}
    unknown = set(doc) - allowed
    if unknown:
        raise CliError(f"{path}: unknown config fields {sorted(unknown)}", EXIT_INTEGRITY)
    base = os.path.dirname(os.path.abspath(path))
    paths = {}
    for key, value in (doc.get("paths") or {}).items():
        resolved = value if os.path.isabs(value) else os.path.join(base, value)
        if not os.path.exists(resolved):
            raise CliError(f"{path}: path {key}={value!r} does not exist", EXIT_INTEGRITY)
        paths[key] = resolved
    doc["paths"] = paths
    try:
        doc["pipeline"] = pipeline.PipelineConfig.from_dict(doc.get("pipeline") or {})
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_INTEGRITY) from exc
    return doc


def _build_config(args, base: pipeline.PipelineConfig) -> pipeline.PipelineConfig:
    fields = base.to_dict()
    for flag, name in (("conf", "conf_threshold"), ("nms_iou", "nms_iou"), ("margin", "crop_margin"),
                       ("discard_label", "discard_label"), ("max_detections", "max_detections")):
        value = getattr(args, flag)
        if value is not None:
            fields[name] = value
    if args.no_truncate:
        fields["max_detections"] = None
    try:
        return pipeline.PipelineConfig(**fields)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INTEGRITY) from exc


def cmd_run(args) -> int:
    paths: dict = {}
    cfg = pipeline.PipelineConfig()
    if args.config:
        doc = load_run_config(args.config)
        paths, cfg = doc["paths"], doc["pipeline"]
    cfg = _build_config(args, cfg)
    manifest = args.manifest or paths.get("manifest")
    gt_path = args.gt or paths.get("gt")
    det_path = args.detections or paths.get("detections")
    cls_path = args.classifications or paths.get("classifications")
    if not manifest:
        raise CliError("a manifest is required (positional or config paths.manifest)")
    out = args.out
    interchange = os.path.join(out, "interchange")

    if args.detector_cmd:
        det = pipeline.external_process_backend(args.detector_cmd, interchange, "detector", args.timeout)
    elif det_path:
        try:
            det = pipeline.file_detector_backend(_read(det_path, "rb"))
        except coco.ParseError as exc:
            raise CliError(f"{det_path}: {exc}", EXIT_INTEGRITY) from exc
    else:
        raise CliError("need --detections or --detector-cmd")
    if args.classifier_cmd:
        cls = pipeline.external_process_backend(args.classifier_cmd, interchange, "classifier", args.timeout)
    elif cls_path:
        try:
            cls = pipeline.file_classifier_backend(_read(cls_path, "rb"))
        except (coco.ParseError, pipeline.MalformedProbabilitiesError) as exc:
            raise CliError(f"{cls_path}: {exc}", EXIT_INTEGRITY) from exc
    else:
        raise CliError("need --classifications or --classifier-cmd")

    try:
        entries = pipeline.parse_manifest(_read(manifest), os.path.dirname(os.path.abspath(manifest)))
    except coco.ParseError as exc:
        raise CliError(f"{manifest}: {exc}", EXIT_INTEGRITY) from exc
    gt_boxes = {}
    if gt_path:
        gt = _load_dataset(gt_path)
        gt_boxes = metrics.ground_truth_boxes(gt)
        sized = []
        for e in entries:
            im = gt.image_index.get(e.image_id)
            if im is not None and e.width is None:
                e = pipeline.CorpusEntry(e.image_id, e.path, e.label, im.width, im.height)
            sized.append(e)
        entries = sized

    ev = pipeline.evaluate_corpus(entries, det, cls, cfg, gt_boxes, workers=args.workers)
    for image_id, result in ev.results.items():
        _write(out, os.path.join("results", f"{image_id}.json"), _dump(result.to_dict()))
    if args.overlay:
        by_id = {e.image_id: e for e in entries}
        for image_id, result in ev.results.items():
            entry = by_id[image_id]
            if not entry.path:
                continue
            img = imgproc.read_image(entry.path)
            drawn = imgproc.render_overlay(img, [(d.box, d.label, d.score) for d in result.detections])
            _write(out, os.path.join("overlays", f"{image_id}.pgm"), imgproc.encode_pgm(drawn))
    summary = ev.summary()
    summary["config"] = cfg.to_dict()
    _write(out, "summary.json", _dump(summary))
    _write(out, "table7.csv", metrics.table7_csv([(os.path.basename(manifest), ev.image_level)]))
    s = ev.image_level
    print(f"{'Accuracy (%)':>14}{'Precision (%)':>15}{'Recall (%)':>12}")
    print(f"{100 * s.accuracy:>14.1f}{100 * s.precision:>15.1f}{100 * s.recall:>12.1f}")
    if ev.detection is not None:
        print(f"AP@50 = {ev.detection.ap50:.4f}")
    if ev.failures:
        for image_id, message in ev.failures.items():
            print(f"failed: {message}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# --------------------------------------------------------------------------- kernels

def _read_boxes(text: str | None) -> list[Box]:
    if not text:
        return []
    try:
        raw = json.loads(text)
        return [Box.from_xywh(b) for b in raw]
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise CliError(f"invalid --boxes: {exc}", EXIT_INTEGRITY) from exc


def _read_pgm(path):
    try:
        return imgproc.read_image(path)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INTEGRITY) from exc


def _write_output_image(path: str, img) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    imgproc.write_image(path, img)


def cmd_kernel_clahe(args) -> int:
    img = _read_pgm(args.image)
    params = imgproc.ClaheParams(args.tiles[0], args.tiles[1], args.clip)
    _write_output_image(args.out, imgproc.clahe(img, params))
    return EXIT_OK


def cmd_kernel_flip(args) -> int:
    img, boxes = imgproc.hflip(_read_pgm(args.image), _read_boxes(args.boxes))
    _write_output_image(args.out, img)
    if args.boxes:
        print(json.dumps([b.as_list() for b in boxes]))
    return EXIT_OK


def cmd_kernel_rotate(args) -> int:
    img, boxes = imgproc.rotate(_read_pgm(args.image), _read_boxes(args.boxes), args.angle)
    _write_output_image(args.out, img)
    if args.boxes:
        print(json.dumps([b.as_list() for b in boxes]))
    return EXIT_OK


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def cmd_kernel_loss(args) -> int:
    if args.loss == "supcon":
        doc = json.loads(_read(args.batch))
        t = args.temperature if args.temperature is not None else doc.get("temperature", losses.DEFAULT_TEMPERATURE)
        value = losses.supcon_loss(np.asarray(doc["embeddings"], dtype=float), doc["labels"], t)
    elif args.loss == "giou":
        value = losses.giou_loss(Box(*args.pred), Box(*args.gt))
    elif args.loss == "l1":
        value = losses.l1_bbox_loss(Box(*args.pred), Box(*args.gt), ImageBounds(args.width, args.height))
    else:
        value = losses.cross_entropy(args.logits, args.target)
    print(_fmt(value))
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fracpipe", description="Fracture-detection pipeline tooling.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stats", help="dataset distribution report")
    s.add_argument("dataset")
    s.add_argument("--out", help="directory for stats.json")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("prepare", help="merge, filter, crop, sample normals and split")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--merge-map", help="file of 'pattern -> super-category' lines")
    s.add_argument("--min-count", type=int, default=100)
    s.add_argument("--split", type=float, default=0.8, help="train fraction")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--margin", type=float, default=0.25)
    s.add_argument("--normal-crops", type=int, default=4000)
    s.add_argument("--exclude-tag", action="append", default=[], help="drop images carrying this tag")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("eval-det", help="detection metrics against COCO ground truth")
    s.add_argument("gt")
    s.add_argument("results")
    s.add_argument("--iou", type=_fraction, default=0.5)
    s.add_argument("--conf", type=_fraction, default=0.3)
    s.add_argument("--per-category", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_det)

    s = sub.add_parser("run", help="run the detector/classifier pipeline over a manifest")
    s.add_argument("manifest", nargs="?")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--gt", help="COCO document with ground-truth boxes and image sizes")
    s.add_argument("--detections", help="COCO results document (file detector)")
    s.add_argument("--classifications", help="crop classification document (file classifier)")
    s.add_argument("--detector-cmd", help="external detector command template")
    s.add_argument("--classifier-cmd", help="external classifier command template")
    s.add_argument("--timeout", type=float, default=pipeline.DEFAULT_TIMEOUT)
    s.add_argument("--conf", type=_fraction)
    s.add_argument("--nms-iou", type=_fraction)
    s.add_argument("--margin", type=float)
    s.add_argument("--discard-label")
    s.add_argument("--max-detections", type=int)
    s.add_argument("--no-truncate", action="store_true", help="skip top-k truncation before NMS")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--overlay", action="store_true")
    s.set_defaults(func=cmd_run)

    k = sub.add_parser("kernels", help="expose image and loss kernels").add_subparsers(
        dest="kernel", required=True
    )
    s = k.add_parser("clahe")
    s.add_argument("image")
    s.add_argument("--out", required=True)
    s.add_argument("--tiles", type=int, nargs=2, default=(8, 8), metavar=("TX", "TY"))
    s.add_argument("--clip", type=float, default=2.0)
    s.set_defaults(func=cmd_kernel_clahe)

    s = k.add_parser("flip")
    s.add_argument("image")
    s.add_argument("--out", required=True)
    s.add_argument("--boxes", help="JSON list of [x, y, w, h]")
    s.set_defaults(func=cmd_kernel_flip)

    s = k.add_parser("rotate")
    s.add_argument("image")
    s.add_argument("--out", required=True)
    s.add_argument("--angle", type=float, required=True)
    s.add_argument("--boxes", help="JSON list of [x, y, w, h]")
    s.set_defaults(func=cmd_kernel_rotate)

    lp = k.add_parser("loss").add_subparsers(dest="loss", required=True)
    s = lp.add_parser("supcon")
    s.add_argument("batch", help='JSON {"embeddings": [[...]], "labels": [...]}')
    s.add_argument("--temperature", type=float)
    s.set_defaults(func=cmd_kernel_loss)
    for name in ("giou", "l1"):
        s = lp.add_parser(name)
        s.add_argument("--pred", type=float, nargs=4, required=True, metavar=("X", "Y", "W", "H"))
        s.add_argument("--gt", type=float, nargs=4, required=True, metavar=("X", "Y", "W", "H"))
        if name == "l1":
            s.add_argument("--width", type=int, required=True)
            s.add_argument("--height", type=int, required=True)
        s.set_defaults(func=cmd_kernel_loss)
    s = lp.add_parser("ce")
    s.add_argument("--logits", type=float, nargs="+", required=True)
    s.add_argument("--target", type=int, required=True)
    s.set_defaults(func=cmd_kernel_loss)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"fracpipe: {exc}", file=sys.stderr)
        return exc.code
    except coco.DatasetError as exc:
        print(f"fracpipe: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except metrics.UndefinedMetricError as exc:
        print(f"fracpipe: {exc}", file=sys.stderr)
        return EXIT_UNDEFINED
    except (ValueError, OSError, KeyError, IndexError) as exc:
        print(f"fracpipe: {exc}", file=sys.stderr)
        return EXIT_ERROR
