"""Synthetic datasets shaped like the wrist/hand radiograph corpus.

These stand in for the proprietary data in demos and tests. Counts follow the
reference dataset (extremity x label image counts, and the final
pathology distribution of the classifier crops).
"""

from __future__ import annotations

import numpy as np

from .coco import Annotation, Category, Dataset, ImageRecord
from .geometry import Box

ORDINALS = ("1st", "2nd", "3rd", "4th", "5th")
MERGED_GROUPS = (
    "Metacarpal Fracture",
    "Distal Phalanx Fracture",
    "Middle Phalanx Fracture",
    "Proximal Phalanx Fracture",
)

# final (post-merge) share of classifier crops, in percent
PATHOLOGY_PERCENT = {
    "Radius Fracture": 22.37,
    "Normal": 13.11,
    "Fracture K-Wire Fixation": 11.06,
    "Metacarpal Fracture": 10.04,
    "Proximal Phalanx Fracture": 8.44,
    "Ulna Styloid Fracture": 7.89,
    "Fracture Screw Fixation": 7.53,
    "Distal Phalanx Fracture": 6.26,
    "Ulna Fracture": 5.15,
    "Middle Phalanx Fracture": 3.36,
    "Scaphoid Fracture": 1.63,
    "Avulsion Fracture": 1.45,
    "Post OP": 1.30,
    "Radius Styloid Fracture": 0.43,
}

# rare findings that fall below the 100-annotation cut
RARE_PATHOLOGIES = {
    "Hamate Fracture": 61,
    "Lunate Fracture": 48,
    "Triquetrum Fracture": 87,
    "Trapezium Fracture": 22,
    "Capitate Fracture": 35,
    "Pisiform Fracture": 9,
    "Carpometacarpal Dislocation": 74,
    "Bone Cyst": 53,
}

EXTREMITY_COUNTS = {
    ("hand", "fracture"): 10_374,
    ("hand", "normal"): 3_797,
    ("wrist", "fracture"): 9_170,
    ("wrist", "normal"): 3_340,
}

N_NORMAL_CROPS = 4000


def raw_category_names() -> list[str]:
    """The 37 pre-merge pathology names."""
    names = [f"{o} {group}" for group in MERGED_GROUPS for o in ORDINALS]
    names += [n for n in PATHOLOGY_PERCENT if n not in MERGED_GROUPS and n != "Normal"]
    names += list(RARE_PATHOLOGIES)
    return names


def target_counts(total_crops: int) -> dict[str, int]:
    """Post-merge pathology crop counts for a corpus of ``total_crops`` crops."""
    return {
        name: int(round(pct / 100.0 * total_crops))
        for name, pct in PATHOLOGY_PERCENT.items()
    }


def pathology_corpus(
    seed: int = 0,
    total_crops: int = 30_511,
    n_normal_images: int = 800,
    image_size: tuple[int, int] = (512, 512),
) -> Dataset:
    """37-category detection corpus that merges/filters down to 13 pathologies.

    With the defaults, the pathology annotations plus ``N_NORMAL_CROPS`` normal
    crops reproduce the reference crop percentages.
    """
    rng = np.random.default_rng(seed)
    names = raw_category_names()
    categories = tuple(Category(i + 1, n, "pathology") for i, n in enumerate(names))
    cat_id = {c.name: c.id for c in categories}

    per_raw: dict[str, int] = {}
    for name, count in target_counts(total_crops).items():
        if name == "Normal":
            continue
        if name in MERGED_GROUPS:
            base, rem = divmod(count, len(ORDINALS))
            for k, o in enumerate(ORDINALS):
                per_raw[f"{o} {name}"] = base + (k < rem)
        else:
            per_raw[name] = count
    per_raw.update(RARE_PATHOLOGIES)

    labels = [n for n in names for _ in range(per_raw[n])]
    order = rng.permutation(len(labels))
    width, height = image_size
    images, annotations = [], []
    ann_id = 0
    k = 0
    image_id = 0
    while k < len(order):
        image_id += 1
        n_here = min(int(rng.integers(1, 3)), len(order) - k)
        extremity = "hand" if rng.random() < 0.53 else "wrist"
        images.append(ImageRecord(image_id, f"img_{image_id:06d}.png", width, height,
                                  extremity, "fracture"))
        for _ in range(n_here):
            w, h = (float(v) for v in rng.uniform(16, 128, size=2).round(1))
            x = float(round(rng.uniform(0, width - w), 1))
            y = float(round(rng.uniform(0, height - h), 1))
            ann_id += 1
            annotations.append(
                Annotation(ann_id, image_id, cat_id[labels[order[k]]], Box(x, y, w, h), w * h)
            )
            k += 1
    for _ in range(n_normal_images):
        image_id += 1
        extremity = "hand" if rng.random() < 0.53 else "wrist"
        images.append(ImageRecord(image_id, f"img_{image_id:06d}.png", width, height,
                                  extremity, "normal"))
    return Dataset(tuple(images), tuple(annotations), categories)


def extremity_corpus() -> Dataset:
    """Annotation-free dataset with the reference hand/wrist x fracture/normal image counts."""
    images = []
    image_id = 0
    for (extremity, label), count in EXTREMITY_COUNTS.items():
        for _ in range(count):
            image_id += 1
            images.append(ImageRecord(image_id, f"xr_{image_id:06d}.png", 1024, 1024, extremity, label))
    return Dataset(tuple(images), (), ())
