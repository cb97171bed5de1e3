"""
Training losses with analytic gradients.

    L = lambda_cls * L_cls + lambda_cpt * L_cpt + lambda_ac * L_ac

L_cls and L_cpt are multilabel binary cross entropies on average-pooled TAMs
(class names against the image's tags, present compounds against compounds
sampled from other images). L_ac asks the softmax over class-name TAMs of an
image and of its mirror to agree with each other's mirrored argmax labels.
"""

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.special import expit, log_softmax, softmax

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
from caption_parser import Lexicon, ParsedImage, Snippet, select_concepts
from errors import ConfigError, DimMismatch, EmptyBatch, NonFiniteLoss
from tam_core import ActivationMap, DEFAULT_ALPHA, argmax_labels, normalize_values

AC_FORMS = ("logsigmoid", "cross_entropy")


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_cpt: float = 0.3
    lambda_ac: float = 0.001

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_cpt", "lambda_ac"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be a finite value >= 0, got {value}")

    def as_tuple(self) -> Tuple[float, float, float]:
        return self.lambda_cls, self.lambda_cpt, self.lambda_ac


@dataclass
class LossValue:
    total: float
    cls: float
    cpt: float
    ac: float
    # gradient of the total loss keyed by upstream tensor name
    gradients: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def parts(self) -> Tuple[float, float, float]:
        return self.cls, self.cpt, self.ac


def avg_pool(x) -> float:
    values = x.values if isinstance(x, ActivationMap) else np.asarray(x)
    return float(np.mean(values))


def binary_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Summed BCE with logits and its gradient.

    -log(sigmoid(x)) = log(1 + e^-x) is evaluated with logaddexp so logits of
    any magnitude stay finite.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    per_item = targets * np.logaddexp(0.0, -logits) + (1.0 - targets) * np.logaddexp(0.0, logits)
    grad = expit(logits) - targets
    return float(np.sum(per_item)), grad


def class_loss(pooled: np.ndarray, present: Iterable[int]) -> Tuple[float, np.ndarray]:
    """BCE over all vocabulary classes; pooled[c] is the pooled TAM of class c's name."""
    pooled = np.asarray(pooled, dtype=np.float64)
    targets = np.zeros_like(pooled)
    for c in present:
        targets[c] = 1.0
    return binary_cross_entropy(pooled, targets)


@dataclass(frozen=True)
class ConceptBatch:
    """Compounds of the image (positives) and compounds of other images (negatives)."""

    present: Tuple[Snippet, ...]
    contrastive: Tuple[Snippet, ...]

    def __post_init__(self):
        overlap = {s.tokens for s in self.present} & {s.tokens for s in self.contrastive}
        if overlap:
            raise ConfigError(f"concepts both present and contrastive: {sorted(' '.join(t) for t in overlap)}")

    def __len__(self) -> int:
        return len(self.present) + len(self.contrastive)

    def snippets(self) -> List[Snippet]:
        """Present first, then contrastive; pooled logits follow this order."""
        return list(self.present) + list(self.contrastive)

    def targets(self) -> np.ndarray:
        return np.concatenate([np.ones(len(self.present)), np.zeros(len(self.contrastive))])


def concepts_loss(pooled: np.ndarray, batch: ConceptBatch) -> Tuple[float, np.ndarray]:
    if len(batch) == 0:
        raise EmptyBatch("concept batch has neither present nor contrastive concepts")
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape != (len(batch),):
        raise DimMismatch(len(batch), pooled.shape, "pooled concept logits")
    return binary_cross_entropy(pooled, batch.targets())


def _occurs_in(tokens: Tuple[str, ...], token_lists: Sequence[Sequence[str]]) -> bool:
    n = len(tokens)
    for caption in token_lists:
        caption = tuple(caption)
        for start in range(len(caption) - n + 1):
            if caption[start:start + n] == tokens:
                return True
    return False


def sample_contrastive(
    corpus: Sequence[ParsedImage],
    image_id: str,
    rng: np.random.Generator,
    lexicon: Optional[Lexicon] = None,
    concept_mode: str = "all_compounds",
    max_present: int = 10,
    num_images: int = 10,
    num_concepts: int = 50,
) -> ConceptBatch:
    """
    Present concepts of one image plus contrastive concepts from other images.

    Contrastive concepts come from up to num_images other images drawn
    without replacement; their deduplicated compounds are subsampled to
    num_concepts. Concepts that occur in the image's own captions are never
    used as negatives.
    """
    by_id = {p.image_id: p for p in corpus}
    if image_id not in by_id:
        raise ConfigError(f"image {image_id!r} is not in the corpus")
    own = by_id[image_id]

    def concepts_of(parsed: ParsedImage) -> List[Snippet]:
        compounds = parsed.compounds()
        if concept_mode == "all_compounds" and lexicon is None:
            return compounds
        if lexicon is None:
            raise ConfigError(f"concept mode {concept_mode!r} needs a lexicon")
        return select_concepts(compounds, concept_mode, lexicon)

    own_concepts = concepts_of(own)
    if len(own_concepts) > max_present:
        picked = rng.choice(len(own_concepts), size=max_present, replace=False)
        present = [own_concepts[i] for i in sorted(picked)]
    else:
        present = list(own_concepts)

    own_tokens = own.caption_tokens()
    excluded = {s.tokens for s in own_concepts}
    others = [p for p in corpus if p.image_id != image_id]
    pool: List[Snippet] = []
    if others:
        chosen = rng.choice(len(others), size=min(num_images, len(others)), replace=False)
        seen: Set[Tuple[str, ...]] = set()
        for i in chosen:
            for s in concepts_of(others[i]):
                if s.tokens in seen or s.tokens in excluded:
                    continue
                seen.add(s.tokens)
                if _occurs_in(s.tokens, own_tokens):
                    continue
                pool.append(s)

    if len(pool) > num_concepts:
        picked = rng.choice(len(pool), size=num_concepts, replace=False)
        contrastive = [pool[i] for i in sorted(picked)]
    else:
        contrastive = pool

    return ConceptBatch(tuple(present), tuple(contrastive))


def _check_grid(tams: np.ndarray, height: int, width: int, what: str) -> None:
    if tams.ndim != 2 or tams.shape[0] != height * width:
        raise DimMismatch((height * width, "K"), tams.shape, what)


def _mirror(labels: np.ndarray, height: int, width: int) -> np.ndarray:
    return labels.reshape(height, width)[:, ::-1].reshape(-1)


def consistency_pseudo_labels(
    tams: np.ndarray, height: int, width: int, alpha: float = DEFAULT_ALPHA
) -> np.ndarray:
    """
    Argmax labels from class-name TAMs (P x K, one column per present class).

    Each column is normalized, the background is (1 - max)^alpha over those
    normalized maps, and no CRF is applied. Returns 0 for background and
    column + 1 for classes, matching the softmax column order used by the loss.
    """
    _check_grid(tams, height, width, "class-name TAMs")
    normalized = np.stack([normalize_values(tams[:, k]) for k in range(tams.shape[1])])
    bg = np.clip(1.0 - normalized.max(axis=0), 0.0, 1.0) ** alpha
    return argmax_labels(normalized, list(range(tams.shape[1])), bg)


def _consistency_term(
    tams: np.ndarray, targets: np.ndarray, form: str, scale: float
) -> Tuple[float, np.ndarray]:
    """
    One half of the auto-consistency loss and its gradient wrt the class TAMs.

    The softmax runs over [background = 0, class TAMs...] per pixel.
    """
    P = tams.shape[0]
    logits = np.hstack([np.zeros((P, 1)), tams])
    Z = softmax(logits, axis=1)
    rows = np.arange(P)

    if form == "logsigmoid":
        z = Z[rows, targets]
        loss = scale * float(np.sum(np.logaddexp(0.0, -z)))
        grad_z = -scale * (1.0 - expit(z))
    elif form == "cross_entropy":
        loss = -scale * float(np.sum(log_softmax(logits, axis=1)[rows, targets]))
        grad_z = -scale / Z[rows, targets]
    else:
        raise ConfigError(f"unknown auto-consistency form {form!r}, expected one of {AC_FORMS}")

    # softmax backward with a one-hot upstream gradient: Z_j * (g_j - Z_t g_t)
    grad_logits = -Z * (Z[rows, targets] * grad_z)[:, None]
    grad_logits[rows, targets] += Z[rows, targets] * grad_z
    return loss, grad_logits[:, 1:]


def auto_consistency_loss_with_labels(
    tams: np.ndarray,
    tams_f: np.ndarray,
    labels: np.ndarray,
    labels_f: np.ndarray,
    height: int,
    width: int,
    form: str = "logsigmoid",
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Auto-consistency loss for fixed pseudo-labels of the image and its mirror.

    labels and labels_f are in their own image's pixel frame; they are
    mirrored here before supervising the other branch. Sums over pixels are
    divided by P.
    """
    _check_grid(tams, height, width, "class-name TAMs")
    _check_grid(tams_f, height, width, "mirrored class-name TAMs")
    if tams.shape != tams_f.shape:
        raise DimMismatch(tams.shape, tams_f.shape, "mirrored class-name TAMs")
    P = height * width
    scale = 1.0 / (2.0 * P)

    loss_f, grad_f = _consistency_term(tams_f, _mirror(labels, height, width), form, scale)
    loss_o, grad_o = _consistency_term(tams, _mirror(labels_f, height, width), form, scale)
    return loss_f + loss_o, grad_o, grad_f


def auto_consistency_loss(
    tams: np.ndarray,
    tams_f: np.ndarray,
    height: int,
    width: int,
    alpha: float = DEFAULT_ALPHA,
    form: str = "logsigmoid",
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Auto-consistency loss; tams and tams_f are P x K with one column per present class.

    Returns (loss, dL/d tams, dL/d tams_f). The pseudo-labels are constants.
    """
    _check_grid(tams_f, height, width, "mirrored class-name TAMs")
    labels = consistency_pseudo_labels(tams, height, width, alpha)
    labels_f = consistency_pseudo_labels(tams_f, height, width, alpha)
    return auto_consistency_loss_with_labels(tams, tams_f, labels, labels_f, height, width, form)


def total_loss(
    parts: Sequence[float],
    weights: LossWeights,
    part_gradients: Optional[Sequence[Mapping[str, np.ndarray]]] = None,
) -> LossValue:
    """Weighted sum of (cls, cpt, ac); per-part gradients are scaled and merged by key."""
    cls, cpt, ac = (float(p) for p in parts)
    if not all(np.isfinite([cls, cpt, ac])):
        raise NonFiniteLoss(f"non-finite loss part: cls={cls}, cpt={cpt}, ac={ac}")
    w = weights.as_tuple()
    total = w[0] * cls + w[1] * cpt + w[2] * ac
    if not np.isfinite(total):
        raise NonFiniteLoss(f"non-finite total loss {total}")

    gradients: Dict[str, np.ndarray] = {}
    if part_gradients is not None:
        for weight, grads in zip(w, part_gradients):
            for key, grad in grads.items():
                if key in gradients:
                    gradients[key] = gradients[key] + weight * grad
                else:
                    gradients[key] = weight * grad
    return LossValue(total, cls, cpt, ac, gradients)
