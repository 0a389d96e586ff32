"""Detector -> gate -> NMS -> crop -> classifier -> discard Normal, on the fixture corpus.

Uses stored detector and classifier outputs (the file backends), so no model is
needed. Run with ``python3 demos/pipeline.py``.
"""

from pathlib import Path

from fracpipe.coco import load_dataset
from fracpipe.metrics import ground_truth_boxes
from fracpipe.pipeline import CorpusEntry, PipelineConfig, evaluate_corpus, file_classifier_backend, file_detector_backend

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main():
    gt = load_dataset(FIXTURES / "gt.json")
    det = file_detector_backend((FIXTURES / "detections.json").read_bytes())
    cls = file_classifier_backend((FIXTURES / "classifications.json").read_bytes())
    entries = [CorpusEntry(im.id, None, im.image_label, im.width, im.height) for im in gt.images]

    for cfg in (PipelineConfig(), PipelineConfig(conf_threshold=0.9)):
        ev = evaluate_corpus(entries, det, cls, cfg, gt_boxes=ground_truth_boxes(gt))
        print(f"conf_threshold {cfg.conf_threshold}, nms_iou {cfg.nms_iou}")
        for image_id, r in sorted(ev.results.items()):
            counts = r.to_dict()["counts"]
            shown = [(d.label, d.score) for d in r.detections]
            print(f"  image {image_id}: {counts} -> {shown}")
        s = ev.image_level
        print(f"  image level: accuracy {s.accuracy:.3f}, precision {s.precision:.3f}, recall {s.recall:.3f}")
        print(f"  AP@50 {ev.detection.ap50:.4f}\n")


if __name__ == "__main__":
    main()
