"""
Tests for the synthetic shapes dataset: rendering, captions, embeddings and augmentation.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add scripts directory to path for imports (needed for pytest)
scripts_dir = Path(__file__).parent
if str(scripts_dir) not in sys.path:
    sys.path.insert(0, str(scripts_dir))

from caption_parser import SnippetKind, extract_class_tags, load_lexicon, parse_corpus  # noqa: E402
from errors import ConfigError  # noqa: E402
from shapes_dataset import (  # noqa: E402
    EMPTY_CAPTION,
    ShapeDatasetSpec,
    augment,
    build_synthetic_table,
    compose_caption,
    flip_image,
    generate_synthetic_dataset,
    samples_to_records,
    shape_mask,
)
from text_embedding import SnippetBank  # noqa: E402
from toy_encoder import AugmentationPolicy  # noqa: E402


@pytest.fixture(scope="module")
def samples():
    return generate_synthetic_dataset(ShapeDatasetSpec(), seed=0, num_images=16)


def test_generation_is_deterministic(samples):
    again = generate_synthetic_dataset(ShapeDatasetSpec(), seed=0, num_images=16)
    for a, b in zip(samples, again):
        assert a.image_id == b.image_id
        assert a.captions == b.captions
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.gt.labels, b.gt.labels)
    other = generate_synthetic_dataset(ShapeDatasetSpec(), seed=1, num_images=16)
    assert [s.captions for s in other] != [s.captions for s in samples]


def test_ids_and_shapes(samples):
    assert samples[3].image_id == "shape_0003"
    for s in samples:
        assert s.image.shape == (32, 32, 3)
        assert (s.gt.height, s.gt.width) == (32, 32)
        assert len(s.captions) == 2
        assert 1 <= len(s.shapes) <= 3


def test_ground_truth_matches_pixels(samples):
    for s in samples:
        grid = s.gt.grid()
        foreground = grid > 0
        assert np.all(s.image[foreground].sum(axis=1) > 0)
        assert np.all(s.image[~foreground] == 0)
        assert s.gt_classes == frozenset(s.gt.class_ids())


def test_captions_tag_exactly_the_visible_classes(samples):
    vocab = ShapeDatasetSpec().vocabulary()
    for s in samples:
        assert extract_class_tags(s.captions, vocab) == set(s.gt_classes)


def test_captions_parse_into_class_related_compounds(samples):
    spec = ShapeDatasetSpec()
    vocab = spec.vocabulary()
    parsed = parse_corpus(samples_to_records(samples), vocab, load_lexicon())
    for p, s in zip(parsed, samples):
        related = [c for c in p.compounds() if c.kind == SnippetKind.CLASS_RELATED]
        assert {c for snippet in related for c in snippet.class_ids} == set(s.gt_classes)
        assert all(len(c.tokens) == 4 for c in related)


def test_unmentioned_shapes_leave_captions_without_tags():
    samples = generate_synthetic_dataset(ShapeDatasetSpec(mention_prob=0.0), seed=0, num_images=4)
    assert all(s.captions == [EMPTY_CAPTION, EMPTY_CAPTION] for s in samples)
    assert all(s.gt_classes for s in samples)


def test_compose_caption():
    rng = np.random.default_rng(0)
    assert compose_caption([], rng) == EMPTY_CAPTION
    assert compose_caption(["a small red square"], rng) == "there is a small red square."
    two = compose_caption(["a small red square", "a large blue circle"], rng)
    assert two.startswith("a small red square ") and two.endswith(" a large blue circle.")


def test_shape_masks():
    square = shape_mask("square", (5, 5), 2, 11)
    assert square.sum() == 25
    circle = shape_mask("circle", (5, 5), 3, 11)
    assert circle[5, 5] and circle[5, 8] and not circle[8, 8]
    triangle = shape_mask("triangle", (5, 5), 3, 11)
    # apex row has one pixel, base row is the widest
    assert triangle[2].sum() == 1
    assert triangle[8].sum() == 7
    with pytest.raises(ConfigError):
        shape_mask("hexagon", (5, 5), 2, 11)


def test_synthetic_table_covers_caption_words(samples):
    spec = ShapeDatasetSpec()
    table = build_synthetic_table(spec, dim=16, seed=0)
    bank = SnippetBank(table, load_lexicon())
    parsed = parse_corpus(samples_to_records(samples), spec.vocabulary(), load_lexicon())
    for p in parsed:
        assert bank.filter(p.compounds()) == p.compounds()
    # singular and plural of a class share a direction
    square, squares = table.vector("square"), table.vector("squares")
    assert np.dot(square, squares) / (np.linalg.norm(square) * np.linalg.norm(squares)) > 0.8


def test_synthetic_table_needs_enough_dimensions():
    with pytest.raises(ConfigError):
        build_synthetic_table(ShapeDatasetSpec(), dim=8)


def test_dataset_spec_validation():
    with pytest.raises(ConfigError):
        ShapeDatasetSpec(classes=("square", "star"))
    with pytest.raises(ConfigError):
        ShapeDatasetSpec(image_size=16)
    with pytest.raises(ConfigError):
        ShapeDatasetSpec(mention_prob=1.5)


def test_augment_keeps_size_and_range(samples):
    rng = np.random.default_rng(3)
    policy = AugmentationPolicy(scale_min=1.0, scale_max=1.5, crop_size=28)
    for s in samples[:4]:
        out = augment(s.image, policy, rng)
        assert out.shape == (28, 28, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_identity_policy():
    image = np.random.default_rng(4).uniform(size=(8, 8, 3))
    policy = AugmentationPolicy(scale_min=1.0, scale_max=1.0, mirror_prob=0.0)
    np.testing.assert_array_equal(augment(image, policy, np.random.default_rng(0)), image)


def test_flip_image():
    image = np.arange(12, dtype=float).reshape(1, 4, 3)
    np.testing.assert_array_equal(flip_image(image)[0, 0], image[0, 3])
    np.testing.assert_array_equal(flip_image(flip_image(image)), image)
