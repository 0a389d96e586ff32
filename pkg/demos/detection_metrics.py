"""AP, mAP, AR and image-level scores on a tiny hand-made example.

Run with ``python3 demos/detection_metrics.py``.
"""

from fracpipe.geometry import Box, Detection
from fracpipe.metrics import (
    average_precision,
    average_recall,
    classification_report,
    evaluate_detections,
    image_level_eval,
    mean_ap,
    pr_curve,
)


def main():
    gts = {1: [Box(0, 0, 10, 10)], 2: [Box(50, 50, 10, 10)]}
    dets = {
        1: [Detection(Box(0, 0, 10, 10), 0.9), Detection(Box(30, 30, 5, 5), 0.8)],
        2: [Detection(Box(50, 50, 10, 10), 0.7)],
    }
    curve = pr_curve(dets, gts, 0.5)
    print("score  recall  precision")
    for s, r, p in zip(curve.scores, curve.recall, curve.precision):
        print(f"{s:5.2f}  {r:6.2f}  {p:9.3f}")
    print(f"AP@50 {average_precision(dets, gts, 0.5):.4f}")

    # a slightly shifted box passes at IoU 0.5 but not at 0.75
    dets[2] = [Detection(Box(52, 50, 10, 10), 0.7)]
    print(f"shifted: AP@50 {average_precision(dets, gts, 0.5):.4f}, "
          f"AP@75 {average_precision(dets, gts, 0.75):.4f}, mAP {mean_ap(dets, gts):.4f}, "
          f"AR@100 {average_recall(dets, gts):.4f}")
    print(evaluate_detections(dets, gts).to_dict())

    # image level: an image is called fractured iff any box survived the pipeline
    labels = {1: "fracture", 2: "fracture", 3: "normal", 4: "normal"}
    surviving = {1: 2, 2: 0, 3: 1, 4: 0}
    s = image_level_eval(labels, surviving)
    print(f"\nimage level: accuracy {s.accuracy:.2f}, precision {s.precision:.2f}, recall {s.recall:.2f}")

    report = classification_report(["A", "A", "B"], ["A", "B", "B"], ["A", "B"])
    print(report)


if __name__ == "__main__":
    main()
