"""
Dataset loading for train/infer runs.

Two sources, chosen by the `dataset` config key:

    synthetic  shapes rendered on the fly (train split seeded by `seed`,
               test split by `seed + TEST_SEED_OFFSET`)
    files      captions JSONL + {id}.ppm images + optional {id}_gt.pgm
               ground truth, vocabulary TSV and word-embedding text file

`write_dataset` stores any dataset in the files layout, so a generated
synthetic set can be fed back through parse/infer/eval.
"""

import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional

import numpy as np

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
from caption_parser import (
    ClassVocabulary,
    Lexicon,
    ParsedImage,
    load_caption_corpus,
    load_irregulars,
    load_lexicon,
    load_vocabulary,
    parse_corpus,
    write_vocabulary,
)
from config import RunConfig
from errors import ConfigError, LabelOutOfRange, MissingPairs
from shapes_dataset import (
    build_synthetic_table,
    generate_synthetic_dataset,
    gt_class_sets,
    samples_to_records,
)
from storage import atomic_write_text, read_pgm, read_ppm, write_jsonl, write_label_pgm, write_ppm
from tam_core import LabelMap
from text_embedding import EmbeddingTable, SnippetBank, load_table, save_table
from train import TrainingData

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
TEST_SEED_OFFSET = 10_000


@dataclass
class Dataset:
    vocab: ClassVocabulary
    lexicon: Lexicon
    table: EmbeddingTable
    parsed: List[ParsedImage]
    images: Dict[str, np.ndarray]
    # empty when no ground truth is available
    gt: Dict[str, LabelMap] = field(default_factory=dict)
    gt_classes: Dict[str, FrozenSet[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.parsed)

    @property
    def has_gt(self) -> bool:
        return bool(self.gt) and all(p.image_id in self.gt for p in self.parsed)

    def bank(self) -> SnippetBank:
        return SnippetBank(self.table, self.lexicon)

    def training_data(self, bank: Optional[SnippetBank] = None) -> TrainingData:
        return TrainingData(self.vocab, self.lexicon, bank or self.bank(), self.parsed, self.images)

    def records(self) -> List[dict]:
        return [{"image_id": p.image_id, "captions": list(p.captions)} for p in self.parsed]

    def with_gt_tags(self) -> "Dataset":
        """Copy whose tags are the ground-truth classes; compounds still come from the captions."""
        missing = [p.image_id for p in self.parsed if p.image_id not in self.gt_classes]
        if missing:
            raise MissingPairs(f"tag_source=gt but no ground truth for {missing[:5]}")
        parsed = [replace(p, tags=set(self.gt_classes[p.image_id])) for p in self.parsed]
        return replace(self, parsed=parsed)


def _lexicon_for(config: RunConfig) -> Lexicon:
    return load_lexicon(Path(config.lexicon_dir) if config.lexicon_dir else None)


def synthetic_dataset(config: RunConfig, split: str = "train") -> Dataset:
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    spec = config.dataset_spec()
    if split == "train":
        samples = generate_synthetic_dataset(spec, config.seed, config.num_images, "shape")
    else:
        samples = generate_synthetic_dataset(
            spec, config.seed + TEST_SEED_OFFSET, config.num_test_images, "test"
        )
    vocab = spec.vocabulary()
    lexicon = _lexicon_for(config)
    return Dataset(
        vocab=vocab,
        lexicon=lexicon,
        table=build_synthetic_table(spec, config.embedding_dim, config.seed),
        parsed=parse_corpus(samples_to_records(samples), vocab, lexicon),
        images={s.image_id: s.image for s in samples},
        gt={s.image_id: s.gt for s in samples},
        gt_classes=gt_class_sets(samples),
    )


def read_image_dir(images_dir: Path, image_ids: List[str]) -> Dict[str, np.ndarray]:
    """{id}.ppm for every id; a missing image raises MissingPairs."""
    images_dir = Path(images_dir)
    missing = [i for i in image_ids if not (images_dir / f"{i}.ppm").exists()]
    if missing:
        raise MissingPairs(f"no image in {images_dir} for captioned ids {missing[:5]}")
    return {i: read_ppm(images_dir / f"{i}.ppm") for i in image_ids}


def read_gt_dir(gt_dir: Path, image_ids: List[str]) -> Dict[str, LabelMap]:
    """{id}_gt.pgm for the ids that have one."""
    gt_dir = Path(gt_dir)
    maps = {}
    for image_id in image_ids:
        path = gt_dir / f"{image_id}_gt.pgm"
        if path.exists():
            maps[image_id] = LabelMap.from_grid(read_pgm(path))
    if maps and len(maps) < len(image_ids):
        logger.warning("Ground truth found for %d of %d images in %s", len(maps), len(image_ids), gt_dir)
    return maps


def files_dataset(config: RunConfig) -> Dataset:
    irregulars = load_irregulars(Path(config.irregulars) if config.irregulars else None)
    vocab = load_vocabulary(Path(config.vocab), irregulars)
    lexicon = _lexicon_for(config)
    records = load_caption_corpus(Path(config.captions))
    ids = [image_id for image_id, _ in records]
    gt = read_gt_dir(Path(config.gt_dir), ids) if config.gt_dir else {}
    for image_id, labels in gt.items():
        bad = [c for c in labels.class_ids() if c >= len(vocab)]
        if bad:
            raise LabelOutOfRange(f"{image_id}: ground truth uses class ids {bad} outside the vocabulary")
    return Dataset(
        vocab=vocab,
        lexicon=lexicon,
        table=load_table(Path(config.embeddings)),
        parsed=parse_corpus(records, vocab, lexicon),
        images=read_image_dir(Path(config.images_dir), ids),
        gt=gt,
        gt_classes={i: frozenset(m.class_ids()) for i, m in gt.items()},
    )


def load_dataset(config: RunConfig, split: str = "train") -> Dataset:
    """Files datasets have a single split; `split` only selects synthetic data."""
    if config.dataset == "synthetic":
        dataset = synthetic_dataset(config, split)
    else:
        dataset = files_dataset(config)
    if config.tag_source == "gt":
        logger.info("Using ground-truth classes as image tags")
        return dataset.with_gt_tags()
    return dataset


def write_dataset(dataset: Dataset, output_dir: Path) -> Path:
    """
    Write the files layout:

        images/{id}.ppm, gt/{id}_gt.pgm, captions.jsonl, vocab.tsv,
        embeddings.txt, gt_classes.jsonl
    """
    output_dir = Path(output_dir)
    (output_dir / "images").mkdir(parents=True, exist_ok=True)
    (output_dir / "gt").mkdir(parents=True, exist_ok=True)

    for p in dataset.parsed:
        write_ppm(output_dir / "images" / f"{p.image_id}.ppm", dataset.images[p.image_id])
        if p.image_id in dataset.gt:
            write_label_pgm(output_dir / "gt" / f"{p.image_id}_gt.pgm", dataset.gt[p.image_id].grid())
    write_jsonl(output_dir / "captions.jsonl", dataset.records())
    write_vocabulary(dataset.vocab, output_dir / "vocab.tsv")
    save_table(dataset.table, output_dir / "embeddings.txt")
    write_jsonl(
        output_dir / "gt_classes.jsonl",
        (
            {"image_id": i, "classes": [dataset.vocab.name(c) for c in sorted(dataset.gt_classes[i])]}
            for i in sorted(dataset.gt_classes)
        ),
    )
    atomic_write_text(
        output_dir / "dataset.conf",
        "\n".join(
            [
                "dataset=files",
                f"captions={output_dir / 'captions.jsonl'}",
                f"images_dir={output_dir / 'images'}",
                f"gt_dir={output_dir / 'gt'}",
                f"vocab={output_dir / 'vocab.tsv'}",
                f"embeddings={output_dir / 'embeddings.txt'}",
                f"embedding_dim={dataset.table.dim}",
            ]
        )
        + "\n",
    )
    return output_dir
