"""
Tests for mean IoU, pixel precision/recall, tag retrieval and flip consistency.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Add scripts directory to path for imports (needed for pytest)
scripts_dir = Path(__file__).parent
if str(scripts_dir) not in sys.path:
    sys.path.insert(0, str(scripts_dir))

from errors import DimMismatch, EmptyMatrix, LabelOutOfRange, MissingPairs  # noqa: E402
from score_segmentation import (  # noqa: E402
    ConfusionMatrix,
    class_groups,
    confusion_for,
    evaluate_label_maps,
    flip_consistency,
    iou,
    load_label_dir,
    tag_retrieval_metrics,
)
from storage import write_label_pgm  # noqa: E402
from tam_core import LabelMap  # noqa: E402


def lm(rows):
    return LabelMap.from_grid(np.array(rows))


def test_perfect_prediction():
    gt = {"a": lm([[0, 1], [2, 2]])}
    report = evaluate_label_maps(gt, gt, ["square", "circle"])
    assert report.mean_iou == 1.0
    assert report.precision == 1.0 and report.recall == 1.0


def test_all_background_prediction_two_pixels():
    report = evaluate_label_maps({"a": lm([[0, 0]])}, {"a": lm([[0, 1]])}, ["square"])
    assert report.per_class_iou == {"background": 0.5, "square": 0.0}
    assert report.mean_iou == pytest.approx(0.25)
    assert report.precision is None
    assert report.recall == 0.0


def test_iou_two_of_four():
    report = evaluate_label_maps({"a": lm([[1, 1, 1, 0, 0]])}, {"a": lm([[1, 1, 0, 1, 0]])}, ["square"])
    assert report.per_class_iou["square"] == pytest.approx(0.5)
    assert report.per_class_iou["background"] == pytest.approx(1 / 3)
    assert report.precision == pytest.approx(2 / 3)
    assert report.recall == pytest.approx(2 / 3)


def test_two_image_fixture():
    """Confusion matrix worked out by hand, rows gt and columns prediction:

        [[3, 0, 0],
         [1, 1, 0],
         [0, 1, 2]]
    """
    gt = {"a": lm([[1, 1], [0, 2]]), "b": lm([[2, 2], [0, 0]])}
    pred = {"a": lm([[1, 0], [0, 2]]), "b": lm([[2, 1], [0, 0]])}
    cm = confusion_for(pred, gt, 2)
    np.testing.assert_array_equal(cm.counts, [[3, 0, 0], [1, 1, 0], [0, 1, 2]])

    report = iou(cm, ["square", "circle"])
    assert report.per_class_iou["background"] == pytest.approx(0.75)
    assert report.per_class_iou["square"] == pytest.approx(1 / 3)
    assert report.per_class_iou["circle"] == pytest.approx(2 / 3)
    assert report.mean_iou == pytest.approx(1.75 / 3)
    assert report.precision == pytest.approx(0.75)
    assert report.recall == pytest.approx(0.6)
    assert report.macro_precision == pytest.approx(0.75)
    assert report.macro_recall == pytest.approx(7 / 12)
    assert report.pixels == 8


def test_disjoint_prediction_scores_zero_foreground():
    report = evaluate_label_maps({"a": lm([[2, 1]])}, {"a": lm([[1, 2]])}, ["square", "circle"])
    assert report.per_class_iou["square"] == 0.0
    assert report.per_class_iou["circle"] == 0.0
    # background never occurs and is left out of the mean
    assert report.per_class_iou["background"] is None
    assert report.mean_iou == 0.0


def test_classes_with_empty_union_are_excluded():
    report = evaluate_label_maps({"a": lm([[0, 1]])}, {"a": lm([[0, 1]])}, ["square", "circle", "triangle"])
    assert report.per_class_iou["circle"] is None
    assert report.mean_iou == 1.0


def test_relabeling_permutes_per_class_iou():
    rng = np.random.default_rng(0)
    gt = {"a": LabelMap(4, 4, rng.integers(0, 4, size=16))}
    pred = {"a": LabelMap(4, 4, rng.integers(0, 4, size=16))}
    names = ["x", "y", "z"]
    base = evaluate_label_maps(pred, gt, names)

    perm = np.array([0, 3, 1, 2])  # label l -> perm[l], background fixed
    swap = lambda m: LabelMap(m.height, m.width, perm[m.labels])  # noqa: E731
    permuted_names = [None] * 3
    for old, new in enumerate(perm[1:], 1):
        permuted_names[new - 1] = names[old - 1]
    moved = evaluate_label_maps({"a": swap(pred["a"])}, {"a": swap(gt["a"])}, permuted_names)

    assert moved.mean_iou == pytest.approx(base.mean_iou)
    for name in names:
        assert moved.per_class_iou[name] == pytest.approx(base.per_class_iou[name])


def test_threaded_accumulation_matches_serial():
    rng = np.random.default_rng(1)
    gt = {f"img{i}": LabelMap(3, 5, rng.integers(0, 3, size=15)) for i in range(7)}
    pred = {k: LabelMap(3, 5, rng.integers(0, 3, size=15)) for k in gt}
    serial = confusion_for(pred, gt, 2, threads=1)
    threaded = confusion_for(pred, gt, 2, threads=3)
    np.testing.assert_array_equal(serial.counts, threaded.counts)


def test_contract_errors():
    with pytest.raises(MissingPairs):
        confusion_for({"a": lm([[0]])}, {"b": lm([[0]])}, 1)
    with pytest.raises(LabelOutOfRange):
        ConfusionMatrix(1).accumulate(lm([[2]]), lm([[0]]))
    with pytest.raises(DimMismatch):
        ConfusionMatrix(1).accumulate(lm([[0, 0]]), lm([[0]]))
    with pytest.raises(EmptyMatrix):
        iou(ConfusionMatrix(2))


class TestTagRetrieval:
    # captions of i1 omit class 2, i2 wrongly tags class 0, i3 tags nothing
    retrieved = {"i1": {0}, "i2": {0, 1}, "i3": set()}
    gt = {"i1": {0, 2}, "i2": {1}, "i3": {2}}

    def test_hand_computed_groups(self):
        report = tag_retrieval_metrics(self.retrieved, self.gt, class_groups(["dog", "cat", "bed"]))
        assert report["all"]["precision"] == pytest.approx(0.75)
        assert report["all"]["recall"] == pytest.approx(0.5)
        assert report["all"]["images_precision"] == 2
        assert report["dog"]["precision"] == pytest.approx(0.5)
        assert report["dog"]["recall"] == pytest.approx(1.0)
        assert report["cat"]["precision"] == 1.0 and report["cat"]["recall"] == 1.0
        assert report["bed"]["precision"] is None
        assert report["bed"]["recall"] == 0.0

    def test_groups_follow_categories(self):
        groups = class_groups(["dog", "cat", "bed"], {"pets": [1, 0], "furniture": [2]})
        assert groups == {"all": [0, 1, 2], "pets": [0, 1], "furniture": [2]}
        report = tag_retrieval_metrics(self.retrieved, self.gt, groups)
        assert "dog" not in report
        assert report["pets"]["precision"] == pytest.approx(0.75)
        assert report["pets"]["recall"] == 1.0
        assert report["pets"]["images_recall"] == 2
        assert report["furniture"]["precision"] is None
        assert report["furniture"]["recall"] == 0.0

    def test_perfect_and_half_recall(self):
        same = tag_retrieval_metrics(self.gt, self.gt)
        assert same["all"]["precision"] == 1.0 and same["all"]["recall"] == 1.0
        half = tag_retrieval_metrics({"x": {0}}, {"x": {0, 1}})
        assert half["all"]["precision"] == 1.0 and half["all"]["recall"] == 0.5

    def test_image_sets_must_match(self):
        with pytest.raises(MissingPairs):
            tag_retrieval_metrics({"a": {0}}, {"b": {0}})


def test_flip_consistency():
    labels = lm([[1, 0, 2]])
    assert flip_consistency(labels, lm([[2, 0, 1]])) == 1.0
    assert flip_consistency(labels, labels) == pytest.approx(1 / 3)


def test_load_label_dir_reads_ids():
    with tempfile.TemporaryDirectory() as tmpdir:
        write_label_pgm(Path(tmpdir) / "img1_label.pgm", np.array([[0, 1]]))
        write_label_pgm(Path(tmpdir) / "img2_gt.pgm", np.array([[2, 2]]))
        write_label_pgm(Path(tmpdir) / "img1_cam_square.pgm", np.array([[9, 9]]))
        maps = load_label_dir(Path(tmpdir))
    assert sorted(maps) == ["img1", "img2"]
    np.testing.assert_array_equal(maps["img2"].labels, [2, 2])
