"""CLAHE, box-aware flips and rotations, crops and overlays on a synthetic radiograph.

Writes a few PGM files to a temporary directory and prints where they are.
Run with ``python3 demos/image_kernels.py``.
"""

import tempfile
from pathlib import Path

import numpy as np

from fracpipe.geometry import Box
from fracpipe.imgproc import ClaheParams, clahe, crop, hflip, render_overlay, rotate, write_image


def fake_radiograph(seed=0, size=256):
    """A dim, low-contrast 'bone' with a crack, over a noisy background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    img = 40 + 10 * rng.random((size, size))
    bone = ((xx - 128) / 30.0) ** 2 + ((yy - 128) / 90.0) ** 2 < 1
    img[bone] += 25
    img[(np.abs(yy - xx * 0.4 - 80) < 2) & bone] -= 15
    return np.clip(img, 0, 255).astype(np.uint8)


def main():
    out = Path(tempfile.mkdtemp(prefix="fracpipe-demo-"))
    img = fake_radiograph()
    boxes = [Box(100, 110, 60, 40)]

    enhanced = clahe(img, ClaheParams(8, 8, 2.0))
    print(f"intensity range before {img.min()}..{img.max()}, after CLAHE {enhanced.min()}..{enhanced.max()}")

    flipped, fboxes = hflip(enhanced, boxes)
    turned, tboxes = rotate(enhanced, boxes, 90)
    tilted, sboxes = rotate(enhanced, boxes, 10)
    print(f"box {boxes[0].as_list()}")
    print(f"  flipped  -> {fboxes[0].as_list()}")
    print(f"  rot 90   -> {tboxes[0].as_list()}")
    print(f"  rot 10   -> {[round(v, 2) for v in sboxes[0].as_list()]} (axis-aligned hull, clamped)")

    patch = crop(enhanced, boxes[0])
    print(f"crop shape {patch.shape}")

    for name, pixels, bxs in (("clahe", enhanced, boxes), ("flip", flipped, fboxes),
                              ("rot90", turned, tboxes), ("rot10", tilted, sboxes)):
        drawn = render_overlay(pixels, [(b, "Radius Fracture", 0.87) for b in bxs])
        write_image(out / f"{name}.pgm", drawn)
    write_image(out / "original.pgm", img)
    print(f"images written to {out}")


if __name__ == "__main__":
    main()
