"""Fracture-detection pipeline tooling: COCO preparation, kernels, metrics and fusion."""

from .geometry import (
    Box,
    DegenerateBoxError,
    Detection,
    ImageBounds,
    expand_with_margin,
    from_corners,
    giou,
    iou,
    nms,
    pairwise_iou,
    to_corners,
)
from .coco import (
    DEFAULT_MERGE_MAP,
    Annotation,
    Category,
    CropRecord,
    Dataset,
    ImageRecord,
    IntegrityError,
    MergeMap,
    MergeRule,
    ParseError,
    distribution_report,
    extract_crop_manifest,
    filter_min_count,
    merge_supercategories,
    parse_dataset,
    sample_normal_crops,
    serialize_dataset,
    stratified_split,
)
from .losses import cross_entropy, giou_loss, l1_bbox_loss, supcon_loss
from .metrics import (
    average_precision,
    average_recall,
    classification_report,
    evaluate_detections,
    image_level_eval,
    match_detections,
    mean_ap,
    operating_point,
)
from .pipeline import PipelineConfig, evaluate_corpus, run_pipeline

__version__ = "0.1.0"
