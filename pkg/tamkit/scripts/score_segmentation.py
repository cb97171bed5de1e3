#!/usr/bin/env python3
"""
Segmentation and tag-retrieval metrics.

Computes mean IoU over classes plus background from a confusion matrix,
pixel precision/recall over foreground classes, tag-retrieval precision and
recall per class group, and the flip-consistency rate of label maps.

Usage:
    python tamkit/scripts/score_segmentation.py \
        --pred-dir runs/latest/infer \
        --gt-dir data/shapes/gt \
        --vocab data/shapes/vocab.tsv
"""

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Set

import numpy as np

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
from caption_parser import load_irregulars, load_vocabulary
from config import thread_limit
from errors import DimMismatch, EmptyMatrix, LabelOutOfRange, MissingPairs, TamkitError
from storage import read_pgm
from tam_core import LabelMap

BACKGROUND_NAME = "background"
LABEL_SUFFIXES = ("_label", "_gt")


class ConfusionMatrix:
    """(K+1) x (K+1) pixel counts; rows are ground truth, columns predictions, index 0 background."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        size = num_classes + 1
        if counts is None:
            counts = np.zeros((size, size), dtype=np.int64)
        if counts.shape != (size, size):
            raise DimMismatch((size, size), counts.shape, "confusion matrix shape")
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred: LabelMap, gt: LabelMap) -> "ConfusionMatrix":
        """Add one image pair in place; returns self."""
        if (pred.height, pred.width) != (gt.height, gt.width):
            raise DimMismatch((gt.height, gt.width), (pred.height, pred.width), "label map size")
        size = self.num_classes + 1
        for name, labels in (("prediction", pred.labels), ("ground truth", gt.labels)):
            bad = labels[(labels < 0) | (labels >= size)]
            if bad.size:
                raise LabelOutOfRange(f"{name} label {int(bad[0])} outside [0, {size - 1}]")
        index = gt.labels.astype(np.int64) * size + pred.labels.astype(np.int64)
        self.counts += np.bincount(index, minlength=size * size).reshape(size, size)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DimMismatch(self.num_classes, other.num_classes, "number of classes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


@dataclass
class MetricReport:
    """IoU per class (None when the class never occurs), mean IoU and pixel precision/recall."""

    per_class_iou: Dict[str, Optional[float]]
    mean_iou: float
    precision: Optional[float]
    recall: Optional[float]
    macro_precision: Optional[float] = None
    macro_recall: Optional[float] = None
    pixels: int = 0
    tag_retrieval: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    flip_consistency: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        result = {
            "mean_iou": self.mean_iou,
            "precision": self.precision,
            "recall": self.recall,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "pixels": self.pixels,
            "per_class_iou": self.per_class_iou,
        }
        if self.tag_retrieval:
            result["tag_retrieval"] = self.tag_retrieval
        if self.flip_consistency is not None:
            result["flip_consistency"] = self.flip_consistency
        return result

    def format_table(self) -> str:
        """Per-class IoU as aligned columns followed by the summary values."""
        width = max(len(name) for name in list(self.per_class_iou) + ["mean IoU"])
        lines = [f"{'class'.ljust(width)}  IoU"]
        for name, value in self.per_class_iou.items():
            lines.append(f"{name.ljust(width)}  {_fmt(value)}")
        lines.append(f"{'mean IoU'.ljust(width)}  {_fmt(self.mean_iou)}")
        lines.append("")
        lines.append(f"precision (micro): {_fmt(self.precision)}")
        lines.append(f"recall (micro):    {_fmt(self.recall)}")
        lines.append(f"precision (macro): {_fmt(self.macro_precision)}")
        lines.append(f"recall (macro):    {_fmt(self.macro_recall)}")
        if self.flip_consistency is not None:
            lines.append(f"flip consistency:  {_fmt(self.flip_consistency)}")
        for group, values in self.tag_retrieval.items():
            lines.append(
                f"tags [{group}]: precision {_fmt(values['precision'])}, recall {_fmt(values['recall'])}"
            )
        return "\n".join(lines) + "\n"


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _ratio(num: float, den: float) -> Optional[float]:
    return float(num / den) if den > 0 else None


def iou(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> MetricReport:
    """
    IoU_c = TP / (TP + FP + FN), averaged over classes with a non-empty union.

    Precision and recall pool foreground pixels (micro); macro values average
    per-class ratios over classes where they are defined.
    """
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix has no pixels")
    names = [BACKGROUND_NAME] + list(class_names or [f"class_{i}" for i in range(cm.num_classes)])
    if len(names) != cm.num_classes + 1:
        raise DimMismatch(cm.num_classes, len(names) - 1, "class names")

    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    union = tp + fp + fn

    per_class = {}
    defined = []
    for i, name in enumerate(names):
        value = _ratio(tp[i], union[i])
        per_class[name] = value
        if value is not None:
            defined.append(value)

    fg = slice(1, None)
    class_precisions = [_ratio(tp[i], tp[i] + fp[i]) for i in range(1, cm.num_classes + 1)]
    class_recalls = [_ratio(tp[i], tp[i] + fn[i]) for i in range(1, cm.num_classes + 1)]
    class_precisions = [v for v in class_precisions if v is not None]
    class_recalls = [v for v in class_recalls if v is not None]

    return MetricReport(
        per_class_iou=per_class,
        mean_iou=float(np.mean(defined)),
        precision=_ratio(tp[fg].sum(), tp[fg].sum() + fp[fg].sum()),
        recall=_ratio(tp[fg].sum(), tp[fg].sum() + fn[fg].sum()),
        macro_precision=float(np.mean(class_precisions)) if class_precisions else None,
        macro_recall=float(np.mean(class_recalls)) if class_recalls else None,
        pixels=cm.total,
    )


def compute_tag_precision(retrieved: Set[int], gt: Set[int]) -> Optional[float]:
    """|retrieved & gt| / |retrieved|, None when nothing was retrieved."""
    return _ratio(len(retrieved & gt), len(retrieved))


def compute_tag_recall(retrieved: Set[int], gt: Set[int]) -> Optional[float]:
    return _ratio(len(retrieved & gt), len(gt))


def tag_retrieval_metrics(
    retrieved: Mapping[str, Set[int]],
    gt: Mapping[str, Set[int]],
    groups: Optional[Mapping[str, Sequence[int]]] = None,
) -> Dict[str, Dict[str, Any]]:
    """
    Mean per-image tag precision and recall for each class group.

    Images whose ratio is undefined for a group (empty denominator) are left
    out of that group's mean; a group with no defined image reports None.
    """
    if set(retrieved) != set(gt):
        missing = sorted(set(retrieved) ^ set(gt))
        raise MissingPairs(f"tag sets cover different images: {missing[:5]}")
    if groups is None:
        all_ids = set().union(*retrieved.values(), *gt.values()) if retrieved else set()
        groups = {"all": sorted(all_ids)}

    report = {}
    for group, class_ids in groups.items():
        members = set(class_ids)
        precisions: List[float] = []
        recalls: List[float] = []
        for image_id in sorted(gt):
            r = set(retrieved[image_id]) & members
            g = set(gt[image_id]) & members
            p = compute_tag_precision(r, g)
            rc = compute_tag_recall(r, g)
            if p is not None:
                precisions.append(p)
            if rc is not None:
                recalls.append(rc)
        report[group] = {
            "precision": sum(precisions) / len(precisions) if precisions else None,
            "recall": sum(recalls) / len(recalls) if recalls else None,
            "images_precision": len(precisions),
            "images_recall": len(recalls),
        }
    return report


def flip_consistency(labels_I: LabelMap, labels_If: LabelMap) -> float:
    """Fraction of pixels where labels of I agree with the mirrored labels of flipped I."""
    if (labels_I.height, labels_I.width) != (labels_If.height, labels_If.width):
        raise DimMismatch((labels_I.height, labels_I.width), (labels_If.height, labels_If.width), "label map size")
    return float(np.mean(labels_I.labels == labels_If.flipped().labels))


def confusion_for(
    pred: Mapping[str, LabelMap],
    gt: Mapping[str, LabelMap],
    num_classes: int,
    threads: int = 1,
) -> ConfusionMatrix:
    """Accumulate every image pair; with threads > 1, per-chunk matrices are merged."""
    if set(pred) != set(gt):
        missing = sorted(set(pred) ^ set(gt))
        raise MissingPairs(f"prediction and ground truth cover different images: {missing[:5]}")
    ids = sorted(gt)

    def run(chunk: Sequence[str]) -> ConfusionMatrix:
        cm = ConfusionMatrix(num_classes)
        for image_id in chunk:
            cm.accumulate(pred[image_id], gt[image_id])
        return cm

    if threads <= 1 or len(ids) < 2:
        return run(ids)
    chunks = [ids[i::threads] for i in range(threads) if ids[i::threads]]
    total = ConfusionMatrix(num_classes)
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        for cm in pool.map(run, chunks):
            total = total.merge(cm)
    return total


def evaluate_label_maps(
    pred: Mapping[str, LabelMap],
    gt: Mapping[str, LabelMap],
    class_names: Sequence[str],
    threads: int = 1,
) -> MetricReport:
    return iou(confusion_for(pred, gt, len(class_names), threads), class_names)


def class_groups(
    class_names: Sequence[str], categories: Optional[Mapping[str, Sequence[int]]] = None
) -> Dict[str, List[int]]:
    """
    Tag-retrieval groups: every class together, then one group per category
    when the vocabulary has categories, otherwise each class alone.
    """
    groups = {"all": list(range(len(class_names)))}
    if categories:
        for category, ids in categories.items():
            groups[category] = sorted(ids)
        return groups
    for i, name in enumerate(class_names):
        groups[name] = [i]
    return groups


def label_id_from_path(path: Path) -> str:
    stem = path.stem
    for suffix in LABEL_SUFFIXES:
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def load_label_dir(directory: Path) -> Dict[str, LabelMap]:
    """Read every *_label.pgm / *_gt.pgm file of a directory keyed by image id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingPairs(f"label directory not found: {directory}")
    maps = {}
    for path in sorted(directory.glob("*.pgm")):
        if not path.stem.endswith(LABEL_SUFFIXES):
            continue
        maps[label_id_from_path(path)] = LabelMap.from_grid(read_pgm(path))
    return maps


def main():
    parser = argparse.ArgumentParser(
        description="Score predicted label maps against ground truth",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--pred-dir", type=Path, required=True, help="Directory with {id}_label.pgm files")
    parser.add_argument("--gt-dir", type=Path, required=True, help="Directory with {id}_gt.pgm files")
    parser.add_argument("--vocab", type=Path, required=True, help="Class vocabulary (TSV)")
    parser.add_argument(
        "--output-metrics",
        type=Path,
        help="Path to write metrics JSON (default: print to stdout)",
    )
    args = parser.parse_args()

    try:
        vocab = load_vocabulary(args.vocab, load_irregulars())
        report = evaluate_label_maps(
            load_label_dir(args.pred_dir), load_label_dir(args.gt_dir), vocab.names(), thread_limit()
        )
    except TamkitError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)

    if args.output_metrics:
        with open(args.output_metrics, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, ensure_ascii=False)
        print(f"Metrics written to: {args.output_metrics}")
    else:
        print(report.format_table())


if __name__ == "__main__":
    main()
