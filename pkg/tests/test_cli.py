import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from fracpipe.cli import main
from fracpipe.coco import Dataset, serialize_dataset
from fracpipe.imgproc import encode_pgm, read_image
from fracpipe.losses import supcon_loss
from fracpipe.synthetic import extremity_corpus, pathology_corpus

import oracles

FIXTURES = Path(__file__).parent / "fixtures"


def write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pathology_file(tmp_path_factory):
    return write(tmp_path_factory.mktemp("corpus") / "corpus.json", serialize_dataset(pathology_corpus(seed=0)))


# --------------------------------------------------------------------------- stats

def test_stats_echoes_extremity_counts(tmp_path, capsys):
    path = write(tmp_path / "t1.json", serialize_dataset(extremity_corpus()))
    assert main(["stats", str(path), "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    for n in ("10,374", "3,797", "9,170", "3,340"):
        assert n in out
    doc = json.loads((tmp_path / "o" / "stats.json").read_text())
    assert doc["extremity"]["hand"] == {"fracture": 10374, "normal": 3797}


def test_stats_empty_and_corrupt(tmp_path, capsys):
    assert main(["stats", str(write(tmp_path / "e.json", serialize_dataset(Dataset())))]) == 0
    bad = {"images": [{"id": 1, "file_name": "a", "width": 5, "height": 5}],
           "annotations": [{"id": 4, "image_id": 99, "category_id": 1, "bbox": [0, 0, 1, 1]}],
           "categories": [{"id": 1, "name": "x"}]}
    capsys.readouterr()
    assert main(["stats", str(write(tmp_path / "bad.json", json.dumps(bad)))]) == 2
    assert "99" in capsys.readouterr().err
    assert main(["stats", str(write(tmp_path / "junk.json", "{oops"))]) == 2
    assert main(["stats", str(tmp_path / "missing.json")]) == 1


# --------------------------------------------------------------------------- prepare

def test_prepare_yields_13_pathologies_and_is_deterministic(pathology_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["prepare", str(pathology_file), "--out", str(a), "--seed", "5"]) == 0
    assert main(["prepare", str(pathology_file), "--out", str(b), "--seed", "5"]) == 0
    assert tree_bytes(a) == tree_bytes(b)
    report = json.loads((a / "prep_report.json").read_text())
    labels = [row["label"] for row in report["distribution"]]
    assert report["n_pathologies"] == 13 and "Normal" in labels and len(labels) == 14
    assert len(report["removed"]) == 8 and all(n < 100 for n in report["removed"].values())
    assert set(report["merged"].values()) == {"Metacarpal Fracture", "Distal Phalanx Fracture",
                                              "Middle Phalanx Fracture", "Proximal Phalanx Fracture"}
    for row in report["distribution"]:
        assert row["train"] + row["val"] == row["count"]
        assert abs(row["val"] - 0.2 * row["count"]) <= 1


def test_prepare_report_matches_recount(pathology_file, tmp_path):
    out = tmp_path / "p"
    assert main(["prepare", str(pathology_file), "--out", str(out), "--normal-crops", "500"]) == 0
    report = json.loads((out / "prep_report.json").read_text())
    counts = {}
    for name in ("crops_train.csv", "crops_val.csv"):
        for line in (out / name).read_text().splitlines()[1:]:
            label = line.rsplit(",", 1)[1]
            counts[label] = counts.get(label, 0) + 1
    assert {row["label"]: row["count"] for row in report["distribution"]} == counts
    assert counts["Normal"] == 500
    total = sum(counts.values())
    for row in report["distribution"]:
        assert row["percent"] == pytest.approx(100 * row["count"] / total, abs=1e-4)
    # different seed, different split
    other = tmp_path / "q"
    main(["prepare", str(pathology_file), "--out", str(other), "--normal-crops", "500", "--seed", "1"])
    assert (other / "crops_val.csv").read_bytes() != (out / "crops_val.csv").read_bytes()


def test_prepare_with_merge_map_file_and_tag_exclusion(tmp_path):
    doc = json.loads((FIXTURES / "extras.json").read_text())
    path = write(tmp_path / "x.json", json.dumps(doc))
    out = tmp_path / "o"
    code = main(["prepare", str(path), "--out", str(out), "--merge-map", str(FIXTURES / "merge_map.txt"),
                 "--min-count", "0", "--normal-crops", "0", "--exclude-tag", "hardware"])
    assert code == 0
    train = json.loads((out / "train.json").read_text())
    assert [im["id"] for im in train["images"]] == [2]


def test_prepare_without_normal_images_fails_as_integrity_error(tmp_path):
    path = write(tmp_path / "x.json", (FIXTURES / "extras.json").read_text())
    assert main(["prepare", str(path), "--out", str(tmp_path / "o"), "--min-count", "0"]) == 2


# --------------------------------------------------------------------------- eval-det

def test_eval_det_fixture(tmp_path, capsys):
    code = main(["eval-det", str(FIXTURES / "gt.json"), str(FIXTURES / "detections.json"),
                 "--out", str(tmp_path)])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc) >= {"ap50", "ap75", "map", "ar100", "precision", "recall"}
    assert (tmp_path / "det_summary.csv").read_text().startswith("Checkpoint,AP@50")
    # raw detections rank TP .92, FP .85, TP .75, then only FPs: same curve as the worked example
    assert abs(doc["ap50"] - (51 + 50 * 2 / 3) / 101) <= 1e-6
    assert round(doc["ap50"], 4) == 0.8350


def test_eval_det_worked_example(tmp_path, capsys):
    gt = {"images": [{"id": 1, "file_name": "a", "width": 100, "height": 100},
                     {"id": 2, "file_name": "b", "width": 100, "height": 100}],
          "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 10, 10]},
                          {"id": 2, "image_id": 2, "category_id": 1, "bbox": [50, 50, 10, 10]}],
          "categories": [{"id": 1, "name": "fracture"}]}
    res = [{"image_id": 1, "category_id": 1, "bbox": [0, 0, 10, 10], "score": 0.9},
           {"image_id": 1, "category_id": 1, "bbox": [30, 30, 5, 5], "score": 0.8},
           {"image_id": 2, "category_id": 1, "bbox": [50, 50, 10, 10], "score": 0.7}]
    g, r = write(tmp_path / "gt.json", json.dumps(gt)), write(tmp_path / "r.json", json.dumps(res))
    assert main(["eval-det", str(g), str(r)]) == 0
    assert json.loads(capsys.readouterr().out)["ap50"] == pytest.approx(0.8350, abs=1e-4)
    assert abs(json.loads(_eval(g, r, capsys))["ap50"] - (51 + 50 * 2 / 3) / 101) <= 1e-6

    perfect = write(tmp_path / "p.json", json.dumps([res[0], res[2]]))
    doc = json.loads(_eval(g, perfect, capsys))
    assert all(doc[k] == 1.0 for k in ("ap50", "ap75", "map", "ar100", "precision", "recall"))

    empty = dict(gt, annotations=[])
    assert main(["eval-det", str(write(tmp_path / "e.json", json.dumps(empty))), str(r)]) == 3


def _eval(g, r, capsys):
    capsys.readouterr()
    assert main(["eval-det", str(g), str(r)]) == 0
    return capsys.readouterr().out


def test_eval_det_rejects_out_of_range_flags(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["eval-det", str(FIXTURES / "gt.json"), str(FIXTURES / "detections.json"), "--iou", "1.5"])
    assert info.value.code == 2


# --------------------------------------------------------------------------- run

def test_run_fixture_corpus(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(FIXTURES / "run_config.json"), "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "Accuracy (%)" in stdout and "AP@50 = 0.8350" in stdout
    summary = json.loads((out / "summary.json").read_text())
    il = summary["image_level"]
    assert (il["tp"], il["fp"], il["tn"], il["fn"]) == (2, 1, 0, 0)
    assert il["accuracy"] == pytest.approx(2 / 3) and il["recall"] == 1.0
    assert summary["detection"]["ap50"] == pytest.approx((51 + 50 * 2 / 3) / 101, abs=1e-12)
    assert (out / "table7.csv").read_text().splitlines() == [
        "Checkpoint,Accuracy (%),Precision (%),Recall (%)", "manifest.csv,66.7,66.7,100.0"]
    r1 = json.loads((out / "results" / "1.json").read_text())
    assert r1["counts"] == {"raw": 3, "below_threshold": 1, "truncated": 0, "nms_suppressed": 1,
                            "discarded_normal": 0, "surviving": 1}
    assert [(d["bbox"], d["label"]) for d in r1["detections"]] == [([52, 50, 40, 40], "Radius Fracture")]
    r2 = json.loads((out / "results" / "2.json").read_text())
    assert [d["label"] for d in r2["detections"]] == ["Scaphoid Fracture"]
    assert r2["counts"]["discarded_normal"] == 1

    again = tmp_path / "again"
    main(["run", "--config", str(FIXTURES / "run_config.json"), "--out", str(again)])
    assert tree_bytes(out) == tree_bytes(again)


def test_run_flags_override_and_validate(tmp_path, capsys):
    out = tmp_path / "o"
    with pytest.raises(SystemExit) as info:
        main(["run", "--config", str(FIXTURES / "run_config.json"), "--out", str(out), "--conf", "1.01"])
    assert info.value.code == 2
    assert not out.exists()
    code = main(["run", "--config", str(FIXTURES / "run_config.json"), "--out", str(out), "--conf", "0.9"])
    assert code == 0
    il = json.loads((out / "summary.json").read_text())["image_level"]
    assert (il["tp"], il["fn"]) == (1, 1)


def test_run_config_validation(tmp_path):
    cfg = json.loads((FIXTURES / "run_config.json").read_text())
    for bad in ({"schema_version": 2}, {"paths": {"manifest": "nope.csv"}}, {"extra": 1},
                {"pipeline": {"nms_iou": 3}}):
        doc = {**cfg, **bad}
        path = write(tmp_path / "c.json", json.dumps(doc))
        # keep relative paths pointing at the fixtures
        for name in ("manifest.csv", "gt.json", "detections.json", "classifications.json"):
            shutil.copy(FIXTURES / name, tmp_path / name)
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_run_partial_failure_exits_4(tmp_path, capsys):
    manifest = write(tmp_path / "m.csv", "image_id,path,label\n1,,fracture\n2,/no/such.pgm,fracture\n")
    code = main(["run", str(manifest), "--out", str(tmp_path / "o"), "--gt", str(FIXTURES / "gt.json"),
                 "--detections", str(FIXTURES / "detections.json"),
                 "--classifications", str(FIXTURES / "classifications.json")])
    assert code == 4
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert list(summary["failures"]) == ["2"] and summary["image_level"]["tp"] == 1


def test_run_writes_overlays(tmp_path):
    img = np.full((200, 200), 40, dtype=np.uint8)
    (tmp_path / "1.pgm").write_bytes(encode_pgm(img))
    manifest = write(tmp_path / "m.csv", "image_id,path,label\n1,1.pgm,fracture\n")
    out = tmp_path / "o"
    code = main(["run", str(manifest), "--out", str(out), "--overlay",
                 "--detections", str(FIXTURES / "detections.json"),
                 "--classifications", str(FIXTURES / "classifications.json")])
    assert code == 0
    drawn = read_image(out / "overlays" / "1.pgm")
    assert drawn.shape == img.shape and (drawn == 255).any()
    assert drawn[50, 52] == 255 and drawn[0, 0] == 40


# --------------------------------------------------------------------------- kernels

def test_kernel_supcon_fixture(capsys):
    path = FIXTURES / "supcon_6x4.json"
    assert main(["kernels", "loss", "supcon", str(path)]) == 0
    printed = float(capsys.readouterr().out)
    doc = json.loads(path.read_text())
    assert printed == float(f"{supcon_loss(np.array(doc['embeddings']), doc['labels'], doc['temperature']):.9g}")
    assert abs(printed - oracles.naive_supcon(doc["embeddings"], doc["labels"], doc["temperature"])) <= 1e-8


def test_kernel_scalar_losses(capsys):
    main(["kernels", "loss", "giou", "--pred", "0", "0", "1", "1", "--gt", "2", "0", "1", "1"])
    main(["kernels", "loss", "l1", "--pred", "20", "10", "20", "20", "--gt", "10", "10", "20", "20",
          "--width", "100", "--height", "50"])
    main(["kernels", "loss", "ce", "--logits", "0", "0", "--target", "0"])
    assert capsys.readouterr().out.split() == ["1.33333333", "0.1", "0.693147181"]
    assert main(["kernels", "loss", "ce", "--logits", "0", "0", "--target", "5"]) == 1


def test_kernel_clahe_constant(tmp_path):
    src = tmp_path / "c.pgm"
    src.write_bytes(encode_pgm(np.full((32, 40), 128, dtype=np.uint8)))
    assert main(["kernels", "clahe", str(src), "--out", str(tmp_path / "o.pgm")]) == 0
    assert len(np.unique(read_image(tmp_path / "o.pgm"))) == 1


def test_kernel_flip_twice_restores_bytes(tmp_path, capsys):
    src = tmp_path / "s.pgm"
    src.write_bytes(encode_pgm(np.random.default_rng(0).integers(0, 256, (20, 30), dtype=np.uint8)))
    main(["kernels", "flip", str(src), "--out", str(tmp_path / "f1.pgm"), "--boxes", "[[10, 5, 20, 30]]"])
    assert json.loads(capsys.readouterr().out) == [[0, 5, 20, 30]]
    main(["kernels", "flip", str(tmp_path / "f1.pgm"), "--out", str(tmp_path / "f2.pgm")])
    assert (tmp_path / "f2.pgm").read_bytes() == src.read_bytes()


def test_kernel_rotate(tmp_path, capsys):
    src = tmp_path / "s.pgm"
    src.write_bytes(encode_pgm(np.zeros((100, 100), dtype=np.uint8)))
    assert main(["kernels", "rotate", str(src), "--out", str(tmp_path / "r.pgm"), "--angle", "180",
                 "--boxes", "[[10, 5, 20, 30]]"]) == 0
    assert json.loads(capsys.readouterr().out) == [[70, 65, 20, 30]]
    assert main(["kernels", "rotate", str(src), "--out", str(tmp_path / "r.pgm"), "--angle", "45"]) == 1
