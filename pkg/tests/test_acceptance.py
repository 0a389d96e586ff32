"""Acceptance suite: one test per top-level criterion.

Each test carries a ``criterion`` marker; ``conftest.py`` prints one PASS/FAIL
line per criterion at the end of the run. Run just this file with
``pytest tests/test_acceptance.py -v``.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from fracpipe.cli import main
from fracpipe.coco import parse_dataset, serialize_dataset
from fracpipe.geometry import Box, DegenerateBoxError, Detection, ImageBounds, expand_with_margin, giou, iou, nms
from fracpipe.imgproc import ClaheParams, clahe
from fracpipe.losses import cross_entropy, supcon_loss
from fracpipe.metrics import average_precision, mean_ap
from fracpipe.pipeline import (
    CorpusEntry,
    crop_key,
    evaluate_corpus,
    file_classifier_backend,
    file_detector_backend,
)
from fracpipe.synthetic import extremity_corpus, pathology_corpus, raw_category_names

import oracles

FIXTURES = Path(__file__).parent / "fixtures"
WORKED_AP = (51 + 50 * 2 / 3) / 101


def note(record, text):
    record("detail", text)


# --------------------------------------------------------------------------- geometry

def random_boxes(rng, n):
    kind = rng.integers(0, 3)
    if kind == 0:  # integer grid: many exact ties and exact threshold hits
        xy = rng.integers(0, 20, (n, 2)).astype(float)
        wh = rng.integers(0, 11, (n, 2)).astype(float)
    elif kind == 1:  # free floats
        xy = rng.uniform(0, 64, (n, 2))
        wh = rng.uniform(0.5, 40, (n, 2))
        wh[rng.random((n, 2)) < 0.05] = 0.0
    else:  # jittered copies of a few anchors
        anchors = rng.uniform(0, 50, (3, 4))
        anchors[:, 2:] = rng.uniform(2, 30, (3, 2))
        base = anchors[rng.integers(0, 3, n)]
        xy = base[:, :2] + rng.normal(0, 1.5, (n, 2))
        wh = np.maximum(base[:, 2:] + rng.normal(0, 1.5, (n, 2)), 0.5)
    return [Box(*v) for v in np.hstack([xy, wh]).tolist()]


def random_scores(rng, n):
    if rng.random() < 0.5:
        return (rng.integers(0, 11, n) / 10).tolist()
    return rng.random(n).tolist()


@pytest.mark.criterion("geometry oracle suite")
def test_geometry_oracle_suite(record_property):
    rng = np.random.default_rng(1001)
    thresholds = [0.0, 0.1, 0.25, 0.5, 0.75, 1.0]
    n_instances, n_pairs = 10_000, 0
    start = time.perf_counter()
    for _ in range(n_instances):
        n = int(rng.integers(0, 21))
        boxes = random_boxes(rng, n)
        scores = random_scores(rng, n)
        if n >= 2:
            for _ in range(3):
                i, j = rng.choice(n, 2, replace=False)
                a, b = boxes[i], boxes[j]
                assert abs(iou(a, b) - float(oracles.exact_iou(a.as_list(), b.as_list()))) <= 1e-12
                if a.area == 0 and b.area == 0:
                    with pytest.raises(DegenerateBoxError):
                        giou(a, b)
                else:
                    assert abs(giou(a, b) - float(oracles.exact_giou(a.as_list(), b.as_list()))) <= 1e-12
                n_pairs += 1
        t = thresholds[int(rng.integers(0, len(thresholds)))] if rng.random() < 0.8 else float(rng.random())
        kept = nms([Detection(b, s) for b, s in zip(boxes, scores)], t)
        expected = oracles.brute_nms([(tuple(b.as_list()), s) for b, s in zip(boxes, scores)], t)
        assert [(d.box, d.score) for d in kept] == [(boxes[i], scores[i]) for i in expected]
    elapsed = time.perf_counter() - start
    note(record_property, f"{n_instances} instances, {n_pairs} exact pairs, {elapsed:.1f} s")
    assert elapsed < 10.0


# --------------------------------------------------------------------------- AP

def random_instance(rng, max_dets=50, max_gts=20):
    """Detections and ground truth spread over 1 to 4 images, at least one gt."""
    n_images = int(rng.integers(1, 5))
    n_gt = int(rng.integers(1, max_gts + 1))
    n_det = int(rng.integers(0, max_dets + 1))
    gt_img = rng.integers(0, n_images, n_gt)
    det_img = rng.integers(0, n_images, n_det)
    gts = {k: [] for k in range(n_images)}
    for k in gt_img.tolist():
        xy = rng.uniform(0, 80, 2)
        wh = rng.uniform(4, 30, 2)
        gts[k].append(Box(*xy.tolist(), *wh.tolist()))
    coarse = rng.random() < 0.5
    dets = {k: [] for k in range(n_images)}
    for k in det_img.tolist():
        if gts[k] and rng.random() < 0.7:
            g = gts[k][int(rng.integers(0, len(gts[k])))]
            jitter = rng.normal(0, 0.15 * min(g.w, g.h), 4)
            box = Box(g.x + jitter[0], g.y + jitter[1], max(g.w + jitter[2], 1.0), max(g.h + jitter[3], 1.0))
        else:
            box = Box(*rng.uniform(0, 80, 2).tolist(), *rng.uniform(4, 30, 2).tolist())
        score = int(rng.integers(1, 21)) / 20 if coarse else round(float(rng.uniform(0.01, 1)), 4)
        dets[k].append(Detection(box, score))
    return dets, gts


def as_tuples(dets, gts):
    return ({k: [(tuple(d.box.as_list()), d.score) for d in v] for k, v in dets.items()},
            {k: [tuple(b.as_list()) for b in v] for k, v in gts.items()})


@pytest.mark.criterion("AP oracle suite")
def test_ap_oracle_suite(record_property):
    rng = np.random.default_rng(1002)
    worst = 0.0
    for _ in range(1000):
        dets, gts = random_instance(rng)
        td, tg = as_tuples(dets, gts)
        for t in (0.5, 0.75):
            err = abs(average_precision(dets, gts, t) - oracles.sweep_ap(td, tg, t))
            worst = max(worst, err)
            assert err <= 1e-9

    gts = {1: [Box(0, 0, 10, 10)], 2: [Box(50, 50, 10, 10)]}
    dets = {1: [Detection(Box(0, 0, 10, 10), 0.9), Detection(Box(30, 30, 5, 5), 0.8)],
            2: [Detection(Box(50, 50, 10, 10), 0.7)]}
    ap = average_precision(dets, gts, 0.5)
    note(record_property, f"1000 instances x 2 thresholds, max error {worst:.1e}; worked example {ap:.6f}")
    assert round(ap, 4) == 0.8350
    assert abs(ap - WORKED_AP) <= 1e-12


# --------------------------------------------------------------------------- monotonicity

TRANSFORMS = (
    lambda s: s * s,
    math.sqrt,
    lambda s: 0.5 + 0.5 * s,
)


def transformed(dets, f):
    return {k: [Detection(d.box, f(d.score)) for d in v] for k, v in dets.items()}


@pytest.mark.criterion("metric monotonicity")
def test_metric_monotonicity(record_property):
    rng = np.random.default_rng(1003)
    n = 1000
    for _ in range(n):
        dets, gts = random_instance(rng)
        ap50 = average_precision(dets, gts, 0.5)
        assert average_precision(dets, gts, 0.75) <= ap50
        assert mean_ap(dets, gts) <= ap50
        for f in TRANSFORMS:
            assert average_precision(transformed(dets, f), gts, 0.5) == ap50
    note(record_property, f"{n} instances, {len(TRANSFORMS)} transforms each")


# --------------------------------------------------------------------------- losses

def unit_rows(rng, n, dim):
    z = rng.normal(size=(n, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


@pytest.mark.criterion("loss kernels")
def test_loss_kernels(record_property):
    rng = np.random.default_rng(1004)
    worst = 0.0
    for _ in range(500):
        n, dim = int(rng.integers(2, 17)), int(rng.integers(1, 9))
        z = unit_rows(rng, n, dim)
        labels = rng.integers(0, int(rng.integers(1, 5)), n).tolist()
        labels[1] = labels[0]
        t = float(rng.uniform(0.05, 1.0))
        base = supcon_loss(z, labels, t)
        err = abs(base - oracles.naive_supcon(z.tolist(), labels, t))
        worst = max(worst, err)
        assert err <= 1e-9
        perm = rng.permutation(n)
        assert abs(supcon_loss(z[perm], [labels[i] for i in perm], t) - base) <= 1e-9
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        assert abs(supcon_loss(z @ q, labels, t) - base) <= 1e-9

    cases = [([1000.0, 0.0], 0), ([1000.0, 0.0], 1), ([0.0, 0.0], 0), ([-1000.0, 1000.0, 3.0], 2)]
    for _ in range(500):
        k = int(rng.integers(1, 12))
        cases.append((rng.normal(0, float(rng.choice([1, 10, 100])), k).tolist(), int(rng.integers(0, k))))
    for logits, k in cases:
        assert abs(cross_entropy(logits, k) - oracles.mp_cross_entropy(logits, k)) <= 1e-9
    note(record_property, f"500 supcon batches, max error {worst:.1e}; {len(cases)} cross-entropy cases")


# --------------------------------------------------------------------------- CLAHE

@pytest.mark.criterion("CLAHE")
def test_clahe_criterion(record_property):
    rng = np.random.default_rng(1005)
    for value in (0, 1, 77, 128, 254, 255):
        for shape in ((64, 64), (37, 53), (9, 100)):
            for params in (ClaheParams(), ClaheParams(3, 5, 1.0), ClaheParams(1, 1, 256.0)):
                out = clahe(np.full(shape, value, dtype=np.uint8), params)
                assert out.shape == shape and len(np.unique(out)) == 1
    n = 120
    for _ in range(n):
        h, w = int(rng.integers(1, 64)), int(rng.integers(1, 64))
        img = rng.integers(0, 256, (h, w), dtype=np.uint8)
        if rng.random() < 0.5:
            img = (img // int(rng.integers(2, 64))).astype(np.uint8)  # sparse, uneven histogram
        np.testing.assert_array_equal(clahe(img, ClaheParams(1, 1, 256.0)), oracles.global_he(img))
    note(record_property, f"constant images on 54 configurations; {n} random images against global HE")


# --------------------------------------------------------------------------- dataset prep

def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion("dataset prep")
def test_dataset_prep(tmp_path, record_property):
    corpus = pathology_corpus(seed=0)
    assert len(corpus.categories) == 37 == len(set(raw_category_names()))
    src = tmp_path / "corpus.json"
    src.write_text(serialize_dataset(corpus), encoding="utf-8")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["prepare", str(src), "--out", str(a), "--seed", "3"]) == 0
    assert main(["prepare", str(src), "--out", str(b), "--seed", "3"]) == 0
    assert tree_bytes(a) == tree_bytes(b)

    report = json.loads((a / "prep_report.json").read_text())
    labels = {row["label"] for row in report["distribution"]}
    assert report["n_pathologies"] == 13 and len(labels) == 14 and "Normal" in labels
    # recount the split from the written crop manifests
    counts = {}
    for part in ("train", "val"):
        for line in (a / f"crops_{part}.csv").read_text().splitlines()[1:]:
            label = line.rsplit(",", 1)[1]
            counts.setdefault(label, {"train": 0, "val": 0})[part] += 1
    assert set(counts) == labels
    worst = 0.0
    for c in counts.values():
        total = c["train"] + c["val"]
        worst = max(worst, abs(c["train"] - 0.8 * total), abs(c["val"] - 0.2 * total))
    assert worst <= 1
    note(record_property, f"13 pathologies + Normal, worst split deviation {worst:.1f} items, reruns identical")


# --------------------------------------------------------------------------- pipeline conservation

LABELS = ("Radius Fracture", "Ulna Fracture", "Scaphoid Fracture", "Normal")


def randomized_fixture(rng, n_images, size=256):
    """Detector and classifier documents; every possible crop gets a fixture label."""
    det_doc, cls_doc, seen = [], [], {}
    bounds = ImageBounds(size, size)
    for image_id in range(n_images):
        for _ in range(int(rng.integers(0, 25))):
            wh = rng.uniform(3, 60, 2)
            xy = rng.uniform(0, size - wh)
            box = Box(*xy.tolist(), *wh.tolist())
            score = int(rng.integers(0, 101)) / 100
            det_doc.append({"image_id": image_id, "category_id": 1, "bbox": box.as_list(), "score": score})
            crop = expand_with_margin(box, 0.25, bounds)
            key = crop_key(image_id, crop)
            if key in seen:
                continue
            label = LABELS[int(rng.integers(0, len(LABELS)))]
            seen[key] = label
            probs = {name: 0.1 for name in LABELS if name != label}
            probs[label] = 1 - 0.1 * (len(LABELS) - 1)
            cls_doc.append({"image_id": image_id, "crop_box": crop.as_list(), "label": label,
                            "probabilities": probs})
    return json.dumps(det_doc), json.dumps(cls_doc), seen


@pytest.mark.criterion("pipeline conservation")
def test_pipeline_conservation(record_property):
    rng = np.random.default_rng(1007)
    n = 1000
    det_doc, cls_doc, fixture_labels = randomized_fixture(rng, n)
    entries = [CorpusEntry(i, None, "fracture" if i % 2 else "normal", 256, 256) for i in range(n)]
    ev = evaluate_corpus(entries, file_detector_backend(det_doc), file_classifier_backend(cls_doc))
    assert not ev.failures and len(ev.results) == n
    raw = discarded = out = 0
    for image_id, r in ev.results.items():
        assert r.is_conserved()
        raw += r.raw_count
        discarded += r.discarded_normal
        for d in r.detections:
            label = fixture_labels[crop_key(image_id, d.crop_box)]
            assert label != "Normal" and d.label == label
            out += 1
    assert discarded > 0 and out > 0
    note(record_property, f"{n} images, {raw} raw detections, {discarded} Normal crops discarded, {out} kept")


# --------------------------------------------------------------------------- end to end

@pytest.mark.criterion("end-to-end fixture parity")
def test_end_to_end_fixture_parity(tmp_path, capsys, record_property):
    out = tmp_path / "run"
    assert main(["run", "--config", str(FIXTURES / "run_config.json"), "--out", str(out)]) == 0
    stdout = capsys.readouterr().out

    survivors = {}
    for image_id in (1, 2, 3):
        doc = json.loads((out / "results" / f"{image_id}.json").read_text())
        survivors[image_id] = [(d["bbox"], d["label"], d["score"], d["crop_box"]) for d in doc["detections"]]
        c = doc["counts"]
        assert c["raw"] == sum(c[k] for k in ("below_threshold", "truncated", "nms_suppressed",
                                              "discarded_normal", "surviving"))
    assert survivors == {
        1: [([52, 50, 40, 40], "Radius Fracture", 0.92, [42, 40, 60, 60])],
        2: [([100, 22, 30, 58], "Scaphoid Fracture", 0.75, [92.5, 7.5, 45, 87])],
        3: [([60, 60, 30, 30], "Ulna Fracture", 0.85, [52.5, 52.5, 45, 45])],
    }

    summary = json.loads((out / "summary.json").read_text())
    assert abs(summary["detection"]["ap50"] - WORKED_AP) <= 1e-12
    il = summary["image_level"]
    assert (il["tp"], il["fp"], il["tn"], il["fn"]) == (2, 1, 0, 0)
    assert abs(il["accuracy"] - 2 / 3) <= 1e-12
    assert abs(il["precision"] - 2 / 3) <= 1e-12
    assert il["recall"] == 1.0

    table7 = (out / "table7.csv").read_text().splitlines()
    assert table7[0] == "Checkpoint,Accuracy (%),Precision (%),Recall (%)"
    assert table7[1:] == ["manifest.csv,66.7,66.7,100.0"]
    for field in ("Accuracy (%)", "Precision (%)", "Recall (%)", "AP@50 = 0.8350"):
        assert field in stdout
    note(record_property, "3 images: boxes, labels, AP@50, accuracy/precision/recall and table7.csv fields")


# --------------------------------------------------------------------------- round trip

@pytest.mark.criterion("COCO round trip")
def test_coco_round_trip(record_property):
    docs = {name: (FIXTURES / name).read_text() for name in ("gt.json", "extras.json")}
    docs["pathology_corpus"] = serialize_dataset(pathology_corpus(seed=1, total_crops=2000, n_normal_images=20))
    docs["extremity_corpus"] = serialize_dataset(extremity_corpus())
    for name, text in docs.items():
        d = parse_dataset(text)
        once = serialize_dataset(d)
        assert parse_dataset(once) == d, name
        assert serialize_dataset(parse_dataset(once)) == once, name
    note(record_property, f"{len(docs)} documents")
