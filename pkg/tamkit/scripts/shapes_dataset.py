"""
Synthetic shapes dataset with captions and ground-truth label maps.

Each image shows 1-3 colored squares, circles or triangles on a black
background. Captions describe the shapes with size and color words joined by
spatial relations, e.g. "a large red square sitting on a small blue circle.",
so the caption parser yields class-related compounds such as
"a large red square". Ground truth is kept for evaluation only.
"""

import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
from caption_parser import ClassVocabulary, load_irregulars
from errors import ConfigError
from tam_core import LabelMap
from text_embedding import EmbeddingTable
from toy_encoder import AugmentationPolicy

logger = logging.getLogger(__name__)

DEFAULT_COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
DEFAULT_SIZES = {"small": (3, 5), "large": (7, 10)}
RELATIONS = ("sitting on", "beside", "near", "above", "below")
# caption used when no shape is mentioned
EMPTY_CAPTION = "a picture of some shapes."
FILLER_WORDS = ("picture", "some", "shapes", "there")


@dataclass(frozen=True)
class ShapeDatasetSpec:
    classes: Tuple[str, ...] = ("square", "circle", "triangle")
    colors: Tuple[Tuple[str, Tuple[float, float, float]], ...] = tuple(DEFAULT_COLORS.items())
    # size word -> inclusive radius range
    sizes: Tuple[Tuple[str, Tuple[int, int]], ...] = tuple(DEFAULT_SIZES.items())
    image_size: int = 32
    max_shapes: int = 3
    mention_prob: float = 1.0
    captions_per_image: int = 2

    def __post_init__(self):
        unknown = set(self.classes) - {"square", "circle", "triangle"}
        if unknown:
            raise ConfigError(f"no renderer for shape classes {sorted(unknown)}")
        if self.max_shapes < 1:
            raise ConfigError(f"max_shapes must be >= 1, got {self.max_shapes}")
        if not 0.0 <= self.mention_prob <= 1.0:
            raise ConfigError(f"mention_prob must be in [0, 1], got {self.mention_prob}")
        largest = max(hi for _, (_, hi) in self.sizes)
        if self.image_size < 2 * largest + 1:
            raise ConfigError(f"image_size {self.image_size} too small for radius {largest}")

    def vocabulary(self) -> ClassVocabulary:
        return ClassVocabulary.from_names(self.classes, load_irregulars())


@dataclass(frozen=True)
class ShapeInstance:
    class_id: int
    color: str
    size: str
    center: Tuple[int, int]
    radius: int


@dataclass
class SyntheticSample:
    image_id: str
    image: np.ndarray
    captions: List[str]
    gt: LabelMap
    gt_classes: FrozenSet[int]
    shapes: List[ShapeInstance] = field(default_factory=list)


def shape_mask(kind: str, center: Tuple[int, int], radius: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - center[0]
    dx = xx - center[1]
    if kind == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == "circle":
        return dy ** 2 + dx ** 2 <= radius ** 2
    if kind == "triangle":
        # apex up, base at the bottom of the bounding box
        return (dy >= -radius) & (dy <= radius) & (2 * np.abs(dx) <= dy + radius)
    raise ConfigError(f"unknown shape {kind!r}")


def shape_phrase(shape: ShapeInstance, vocab: ClassVocabulary) -> str:
    return f"a {shape.size} {shape.color} {vocab.name(shape.class_id)}"


def compose_caption(phrases: Sequence[str], rng: np.random.Generator) -> str:
    """Join shape phrases with random spatial relations into one sentence."""
    if not phrases:
        return EMPTY_CAPTION
    if len(phrases) == 1:
        return f"there is {phrases[0]}."
    parts = [phrases[0]]
    for phrase in phrases[1:]:
        parts.append(RELATIONS[rng.integers(len(RELATIONS))])
        parts.append(phrase)
    return " ".join(parts) + "."


def render_sample(
    spec: ShapeDatasetSpec, vocab: ClassVocabulary, rng: np.random.Generator, image_id: str
) -> SyntheticSample:
    size = spec.image_size
    image = np.zeros((size, size, 3))
    labels = np.zeros((size, size), dtype=np.int64)
    colors = dict(spec.colors)
    sizes = dict(spec.sizes)

    drawn: List[ShapeInstance] = []
    masks: List[np.ndarray] = []
    for _ in range(int(rng.integers(1, spec.max_shapes + 1))):
        class_id = int(rng.integers(len(spec.classes)))
        color = spec.colors[rng.integers(len(spec.colors))][0]
        size_word = spec.sizes[rng.integers(len(spec.sizes))][0]
        lo, hi = sizes[size_word]
        radius = int(rng.integers(lo, hi + 1))
        center = (int(rng.integers(radius, size - radius)), int(rng.integers(radius, size - radius)))
        mask = shape_mask(spec.classes[class_id], center, radius, size)
        image[mask] = colors[color]
        labels[mask] = class_id + 1
        # later shapes occlude earlier ones
        masks = [m & ~mask for m in masks]
        masks.append(mask)
        drawn.append(ShapeInstance(class_id, color, size_word, center, radius))

    visible = [s for s, m in zip(drawn, masks) if m.any()]
    if len(visible) < len(drawn):
        logger.debug("%s: %d shape(s) fully occluded", image_id, len(drawn) - len(visible))

    mentioned = [s for s in visible if rng.random() < spec.mention_prob]
    phrases = [shape_phrase(s, vocab) for s in mentioned]
    captions = [compose_caption(phrases, rng)]
    for _ in range(spec.captions_per_image - 1):
        captions.append(compose_caption(phrases[::-1], rng))

    gt = LabelMap.from_grid(labels)
    return SyntheticSample(
        image_id=image_id,
        image=image,
        captions=captions,
        gt=gt,
        gt_classes=frozenset(gt.class_ids()),
        shapes=visible,
    )


def generate_synthetic_dataset(
    spec: ShapeDatasetSpec, seed: int, num_images: int = 64, id_prefix: str = "shape"
) -> List[SyntheticSample]:
    """Deterministic for a given (spec, seed, num_images)."""
    rng = np.random.default_rng(seed)
    vocab = spec.vocabulary()
    return [render_sample(spec, vocab, rng, f"{id_prefix}_{i:04d}") for i in range(num_images)]


def build_synthetic_table(spec: ShapeDatasetSpec, dim: int = 16, seed: int = 0, noise: float = 0.05) -> EmbeddingTable:
    """
    Word vectors with hand-placed clusters.

    Each class (both forms), color and size word gets its own basis direction
    plus a little seeded noise; filler words share one more direction.
    """
    vocab = spec.vocabulary()
    groups: List[Tuple[str, ...]] = [tuple(e.singular.split() + e.plural.split()) for e in vocab]
    groups += [(name,) for name, _ in spec.colors]
    groups += [(name,) for name, _ in spec.sizes]
    groups.append(FILLER_WORDS)
    if dim < len(groups):
        raise ConfigError(f"embedding_dim {dim} is smaller than the {len(groups)} word groups")

    rng = np.random.default_rng(seed)
    vectors: Dict[str, np.ndarray] = {}
    for axis, words in enumerate(groups):
        for word in words:
            if word in vectors:
                continue
            v = rng.normal(0.0, noise, size=dim)
            v[axis] += 1.0
            vectors[word] = v
    return EmbeddingTable.from_dict(vectors)


def flip_image(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random scaling, cropping and mirroring."""
    size = image.shape[0]
    crop = policy.crop_for(size)
    scale = rng.uniform(policy.scale_min, policy.scale_max)
    out = image
    if scale != 1.0:
        out = ndimage.zoom(image, (scale, scale, 1), order=1)
        out = np.clip(out, 0.0, 1.0)
    h, w = out.shape[:2]
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    out = out[top:top + crop, left:left + crop]
    if rng.random() < policy.mirror_prob:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def samples_to_records(samples: Sequence[SyntheticSample]) -> List[Tuple[str, List[str]]]:
    """(image_id, captions) pairs in the caption corpus format."""
    return [(s.image_id, list(s.captions)) for s in samples]


def gt_class_sets(samples: Sequence[SyntheticSample]) -> Dict[str, FrozenSet[int]]:
    return {s.image_id: s.gt_classes for s in samples}
