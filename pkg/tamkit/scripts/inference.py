"""
Label estimation with a trained model.

For every tagged class of an image, the normalized TAMs of the class name
forms and the class-related compounds of its captions are fused into a CAM;
background and argmax labels follow. Images without tags come out as
all-background maps.
"""

import logging
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
from caption_parser import ClassVocabulary, ParsedImage, Snippet
from config import thread_limit
from datasets import Dataset
from errors import MissingPairs
from score_segmentation import (
    MetricReport,
    class_groups,
    evaluate_label_maps,
    flip_consistency,
    tag_retrieval_metrics,
)
from shapes_dataset import flip_image
from storage import write_activation_pgm, write_label_pgm
from tam_core import (
    ActivationMap,
    ConceptSetPhi,
    LabelMap,
    MapKind,
    background_map,
    build_phi,
    class_activation_maps,
    estimate_labels,
    normalize_tam,
    tam,
)
from text_embedding import SnippetBank, textual_path_batch
from train import TamModel

logger = logging.getLogger(__name__)


@dataclass
class ImageInference:
    image_id: str
    labels: LabelMap
    cams: Dict[int, ActivationMap] = field(default_factory=dict)
    background: Optional[ActivationMap] = None
    # normalized TAM per snippet text, filled on request
    tams: Dict[str, ActivationMap] = field(default_factory=dict)


def snippet_embeddings(
    model: TamModel, bank: SnippetBank, snippets: Iterable[Snippet]
) -> Dict[Tuple[str, ...], np.ndarray]:
    """e_txt per token sequence for the snippets the embedding table covers."""
    unique: List[Snippet] = []
    seen = set()
    for s in bank.filter(snippets):
        if s.tokens not in seen:
            seen.add(s.tokens)
            unique.append(s)
    if not unique:
        return {}
    e_txt, _ = textual_path_batch(bank.matrix(unique), model.text)
    return {s.tokens: e_txt[i] for i, s in enumerate(unique)}


def background_labels(height: int, width: int) -> LabelMap:
    return LabelMap(height, width, np.zeros(height * width, dtype=np.int64))


def infer_image(
    model: TamModel,
    image: np.ndarray,
    parsed: ParsedImage,
    vocab: ClassVocabulary,
    bank: SnippetBank,
    alpha: float = 4.0,
    keep_tams: bool = False,
) -> ImageInference:
    H, W = image.shape[:2]
    if not parsed.tags:
        logger.warning("%s: no class tagged in the captions, labeling all background", parsed.image_id)
        return ImageInference(parsed.image_id, background_labels(H, W))

    phis: List[ConceptSetPhi] = []
    for class_id in sorted(parsed.tags):
        kept = bank.filter(build_phi(class_id, vocab, parsed).snippets)
        if not kept:
            logger.warning("%s: no embeddable snippet for class %s", parsed.image_id, vocab.name(class_id))
            continue
        phis.append(ConceptSetPhi(class_id, tuple(kept)))
    if not phis:
        return ImageInference(parsed.image_id, background_labels(H, W))

    E = model.encoder.forward(image)
    embeddings = snippet_embeddings(model, bank, [s for phi in phis for s in phi.snippets])
    cams = class_activation_maps(E, phis, embeddings)
    bg = background_map(cams, alpha)
    result = ImageInference(parsed.image_id, estimate_labels(cams, bg), cams, bg)

    if keep_tams:
        for phi in phis:
            for s in phi.snippets:
                if s.text not in result.tams:
                    result.tams[s.text] = normalize_tam(tam(E, embeddings[s.tokens]))
    return result


def uniform_class_maps(tags: Iterable[int], height: int, width: int) -> Dict[int, ActivationMap]:
    """Constant CAM of 1 for every tagged class: class tags without localization."""
    ones = np.ones(height * width)
    return {c: ActivationMap(height, width, ones.copy(), MapKind.NORMALIZED) for c in sorted(tags)}


def tags_only_labels(tags: Iterable[int], height: int, width: int, alpha: float = 4.0) -> LabelMap:
    cams = uniform_class_maps(tags, height, width)
    if not cams:
        return background_labels(height, width)
    return estimate_labels(cams, background_map(cams, alpha))


def predict_dataset(
    model: TamModel,
    images: Mapping[str, np.ndarray],
    parsed: Sequence[ParsedImage],
    vocab: ClassVocabulary,
    bank: SnippetBank,
    alpha: float = 4.0,
    keep_tams: bool = False,
    threads: Optional[int] = None,
) -> Dict[str, ImageInference]:
    """Per-image inference, spread over up to TAMKIT_THREADS worker threads."""
    # warm the embedding cache single-threaded
    for p in parsed:
        for class_id in p.tags:
            bank.filter(build_phi(class_id, vocab, p).snippets)

    def run(p: ParsedImage) -> ImageInference:
        return infer_image(model, images[p.image_id], p, vocab, bank, alpha, keep_tams)

    workers = threads or thread_limit()
    if workers <= 1:
        return {p.image_id: run(p) for p in parsed}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, parsed))
    return {r.image_id: r for r in results}


def flip_consistency_rate(
    model: TamModel,
    images: Mapping[str, np.ndarray],
    parsed: Sequence[ParsedImage],
    vocab: ClassVocabulary,
    bank: SnippetBank,
    alpha: float = 4.0,
    labels: Optional[Mapping[str, LabelMap]] = None,
) -> Optional[float]:
    """
    Pixel-pooled agreement between labels of each image and mirrored labels
    of its flip. Untagged images are skipped; `labels` reuses predictions of
    the unflipped images when given.
    """
    agree = 0.0
    pixels = 0
    for p in parsed:
        if not p.tags:
            continue
        image = images[p.image_id]
        if labels is not None and p.image_id in labels:
            own = labels[p.image_id]
        else:
            own = infer_image(model, image, p, vocab, bank, alpha).labels
        mirrored = infer_image(model, flip_image(image), p, vocab, bank, alpha).labels
        agree += flip_consistency(own, mirrored) * own.labels.size
        pixels += own.labels.size
    return agree / pixels if pixels else None


_SLUG = re.compile(r"[^a-z0-9]+")


def slugify(text: str) -> str:
    return _SLUG.sub("-", text.lower()).strip("-") or "snippet"


def write_inference(out_dir: Path, result: ImageInference, vocab: ClassVocabulary) -> List[Path]:
    """{id}_label.pgm, {id}_cam_{class}.pgm and, when kept, {id}_tam_{snippet}.pgm."""
    out_dir = Path(out_dir)
    written = []
    path = out_dir / f"{result.image_id}_label.pgm"
    write_label_pgm(path, result.labels.grid())
    written.append(path)
    for class_id, cam_map in sorted(result.cams.items()):
        path = out_dir / f"{result.image_id}_cam_{slugify(vocab.name(class_id))}.pgm"
        write_activation_pgm(path, cam_map.grid())
        written.append(path)
    for text, tam_map in sorted(result.tams.items()):
        path = out_dir / f"{result.image_id}_tam_{slugify(text)}.pgm"
        write_activation_pgm(path, tam_map.grid())
        written.append(path)
    return written


def score_model(
    model: TamModel,
    dataset: Dataset,
    bank: SnippetBank,
    alpha: float = 4.0,
    threads: Optional[int] = None,
    predictions: Optional[Mapping[str, ImageInference]] = None,
) -> MetricReport:
    """Label metrics against ground truth, tag retrieval and flip consistency."""
    if not dataset.has_gt:
        raise MissingPairs("dataset has no ground truth for every image")
    workers = threads or thread_limit()
    if predictions is None:
        predictions = predict_dataset(
            model, dataset.images, dataset.parsed, dataset.vocab, bank, alpha, threads=workers
        )
    names = dataset.vocab.names()
    report = evaluate_label_maps(
        {i: r.labels for i, r in predictions.items()}, dataset.gt, names, workers
    )
    report.tag_retrieval = tag_metrics(dataset)
    report.flip_consistency = flip_consistency_rate(
        model,
        dataset.images,
        dataset.parsed,
        dataset.vocab,
        bank,
        alpha,
        labels={i: r.labels for i, r in predictions.items()},
    )
    return report


def tag_metrics(dataset: Dataset) -> Dict[str, Dict[str, Any]]:
    retrieved = {p.image_id: set(p.tags) for p in dataset.parsed}
    gt = {i: set(dataset.gt_classes.get(i, ())) for i in retrieved}
    return tag_retrieval_metrics(retrieved, gt, class_groups(dataset.vocab.names(), dataset.vocab.categories()))


def score_tags_only(dataset: Dataset, alpha: float = 4.0) -> MetricReport:
    """Metrics of the baseline that spreads every tagged class over the whole image."""
    if not dataset.has_gt:
        raise MissingPairs("dataset has no ground truth for every image")
    pred = {}
    for p in dataset.parsed:
        gt = dataset.gt[p.image_id]
        pred[p.image_id] = tags_only_labels(p.tags, gt.height, gt.width, alpha)
    report = evaluate_label_maps(pred, dataset.gt, dataset.vocab.names())
    report.tag_retrieval = tag_metrics(dataset)
    # constant maps are their own mirror
    report.flip_consistency = 1.0
    return report
