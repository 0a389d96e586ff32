"""Training objectives evaluated on toy inputs.

Only the forward values are computed; there is no autograd here.
Run with ``python3 demos/losses.py``.
"""

import numpy as np

from fracpipe.geometry import Box, ImageBounds
from fracpipe.losses import cross_entropy, giou_loss, l1_bbox_loss, supcon_loss


def normalize(z):
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def main():
    rng = np.random.default_rng(0)
    labels = ["radius"] * 4 + ["ulna"] * 4 + ["scaphoid"] * 4
    centers = normalize(rng.normal(size=(3, 8)))
    for spread in (0.05, 0.3, 1.0, 3.0):
        z = normalize(np.repeat(centers, 4, axis=0) + spread * rng.normal(size=(12, 8)))
        print(f"supcon, class spread {spread:4.2f}: {supcon_loss(z, labels):.4f}")

    gt = Box(50, 50, 40, 40)
    bounds = ImageBounds(200, 200)
    print()
    for pred in (Box(50, 50, 40, 40), Box(55, 52, 40, 36), Box(90, 50, 40, 40), Box(150, 150, 10, 10)):
        print(f"pred {pred.as_list()}: giou loss {giou_loss(pred, gt):.4f}, "
              f"l1 loss {l1_bbox_loss(pred, gt, bounds):.4f}")

    print()
    for logits in ([2.0, 0.5, -1.0], [0.0, 0.0, 0.0], [1000.0, 0.0, 0.0]):
        print(f"cross entropy {logits}, true class 0: {cross_entropy(logits, 0):.6g}")
    print(f"cross entropy [1000, 0, 0], true class 1: {cross_entropy([1000.0, 0.0, 0.0], 1):.6g}")


if __name__ == "__main__":
    main()
