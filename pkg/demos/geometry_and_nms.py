"""Box overlap measures and greedy non-maximum suppression.

Run with ``python3 demos/geometry_and_nms.py``.
"""

from fracpipe.geometry import Box, Detection, ImageBounds, expand_with_margin, giou, iou, nms, pairwise_iou


def main():
    a = Box(0, 0, 10, 10)
    b = Box(5, 0, 10, 10)
    far = Box(40, 40, 10, 10)
    print(f"iou(a, b)   = {iou(a, b):.4f}   (half-overlapping squares: 50 / 150)")
    print(f"giou(a, far) = {giou(a, far):.4f}  (disjoint boxes still get a gradient signal)")

    # a cluster of detections on one fracture plus a separate finding
    dets = [
        Detection(Box(52, 50, 40, 40), 0.92),
        Detection(Box(54, 52, 38, 38), 0.60),
        Detection(Box(50, 48, 44, 44), 0.55),
        Detection(Box(150, 150, 20, 20), 0.40),
    ]
    print("\npairwise IoU:")
    for row in pairwise_iou([d.box for d in dets], [d.box for d in dets]):
        print("  " + "  ".join(f"{v:.2f}" for v in row))

    for threshold in (0.1, 0.5, 0.95):
        kept = nms(dets, threshold)
        print(f"nms @ {threshold:.2f} keeps scores {[d.score for d in kept]}")

    # crops for the classifier are padded by a fraction of the box size and clamped to the image
    bounds = ImageBounds(200, 200)
    for d in nms(dets, 0.1):
        print(f"box {d.box.as_list()} -> crop {expand_with_margin(d.box, 0.25, bounds).as_list()}")
    print(f"edge box clamps: {expand_with_margin(Box(190, 0, 10, 10), 0.25, bounds).as_list()}")


if __name__ == "__main__":
    main()
