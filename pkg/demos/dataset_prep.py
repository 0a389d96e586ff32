"""From a raw 37-category detection corpus to classifier crop manifests.

The synthetic corpus stands in for the private radiograph annotations: the same
category names, with finger-specific fracture types that get merged and rare
findings that fall below the annotation cut.

Run with ``python3 demos/dataset_prep.py``.
"""

from fracpipe.coco import (
    DEFAULT_MERGE_MAP,
    distribution_report,
    extract_crop_manifest,
    filter_min_count,
    merge_supercategories,
    sample_normal_crops,
    stratified_split,
)
from fracpipe.synthetic import pathology_corpus


def main():
    raw = pathology_corpus(seed=0)
    print(f"raw corpus: {len(raw.images)} images, {len(raw.annotations)} boxes, "
          f"{len(raw.categories)} categories")

    merged = merge_supercategories(raw, DEFAULT_MERGE_MAP)
    print(f"after merging finger subtypes: {len(merged.categories)} categories")

    kept = filter_min_count(merged, 100)
    dropped = sorted({c.name for c in merged.categories} - {c.name for c in kept.categories})
    print(f"after the 100-annotation cut: {len(kept.categories)} categories; dropped {dropped}")

    crops, skipped = extract_crop_manifest(kept, margin=0.25)
    sizes = [(c.crop_box.w, c.crop_box.h) for c in crops]
    normals = sample_normal_crops(kept, 4000, sizes, seed=0)
    print(f"{len(crops)} pathology crops ({len(skipped)} degenerate boxes skipped), "
          f"{len(normals)} Normal crops sampled from normal images")

    report = distribution_report(kept, [c.label for c in normals])
    print()
    print(report.format())

    train, val = stratified_split(kept, 0.8, seed=0)
    print(f"\nsplit: {len(train.images)} train images, {len(val.images)} val images")


if __name__ == "__main__":
    main()
