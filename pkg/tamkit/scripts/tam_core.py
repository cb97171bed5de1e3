"""
Text activation maps, class activation maps and label estimation.

A text activation map (TAM) is the per-pixel dot product of the visual
embedding with a snippet's text embedding. Class activation maps (CAMs) fuse
the normalized TAMs of a class name and its related compounds by pixelwise
max; the background map is (1 - max CAM)^alpha and labels are the per-pixel
argmax over class maps and background.

Label indices: 0 is background, class_id + 1 for classes.
"""

import enum
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Union

import numpy as np

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
from caption_parser import ClassVocabulary, ParsedImage, Snippet, SnippetKind
from errors import DimMismatch, EmptyPhi, NoPresentClasses, NumericError, ShapeMismatch
from text_embedding import TextEmbedding

BACKGROUND = 0
DEFAULT_ALPHA = 4.0


@dataclass(frozen=True)
class VisualEmbeddingMap:
    """Per-pixel embedding, P x dim, rows in row-major pixel order."""

    height: int
    width: int
    data: np.ndarray

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ShapeMismatch(f"embedding map needs at least one pixel, got {self.height}x{self.width}")
        if self.data.ndim != 2 or self.data.shape[0] != self.height * self.width:
            raise ShapeMismatch(
                f"embedding data shape {self.data.shape} does not match {self.height}x{self.width} pixels"
            )
        if not np.all(np.isfinite(self.data)):
            raise NumericError("embedding map contains NaN or Inf")

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def num_pixels(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "VisualEmbeddingMap":
        """Build from an H x W x dim array."""
        if grid.ndim != 3:
            raise ShapeMismatch(f"expected H x W x dim array, got shape {grid.shape}")
        h, w, d = grid.shape
        return cls(h, w, grid.reshape(h * w, d))

    def grid(self) -> np.ndarray:
        return self.data.reshape(self.height, self.width, self.dim)

    def flipped(self) -> "VisualEmbeddingMap":
        return VisualEmbeddingMap.from_grid(self.grid()[:, ::-1, :].copy())


class MapKind(enum.Enum):
    RAW = "raw"
    NORMALIZED = "normalized"
    BACKGROUND = "background"


@dataclass(frozen=True)
class ActivationMap:
    height: int
    width: int
    values: np.ndarray
    kind: MapKind = MapKind.RAW

    def __post_init__(self):
        if self.values.shape != (self.height * self.width,):
            raise ShapeMismatch(
                f"activation values shape {self.values.shape} does not match {self.height}x{self.width}"
            )

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.height, self.width)

    def flipped(self) -> "ActivationMap":
        values = self.grid()[:, ::-1].reshape(-1).copy()
        return ActivationMap(self.height, self.width, values, self.kind)

    def same_shape(self, other: "ActivationMap") -> bool:
        return (self.height, self.width) == (other.height, other.width)


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel label: 0 background, class_id + 1 otherwise."""

    height: int
    width: int
    labels: np.ndarray

    def __post_init__(self):
        if self.labels.shape != (self.height * self.width,):
            raise ShapeMismatch(
                f"label shape {self.labels.shape} does not match {self.height}x{self.width}"
            )

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "LabelMap":
        h, w = grid.shape
        return cls(h, w, grid.reshape(-1).astype(np.int64))

    def grid(self) -> np.ndarray:
        return self.labels.reshape(self.height, self.width)

    def flipped(self) -> "LabelMap":
        return LabelMap.from_grid(self.grid()[:, ::-1].copy())

    def class_ids(self) -> List[int]:
        """Classes appearing in the map, background excluded."""
        return [int(v) - 1 for v in np.unique(self.labels) if v != BACKGROUND]


@dataclass(frozen=True)
class ConceptSetPhi:
    """Snippets whose TAMs are fused into one class's CAM."""

    class_id: int
    snippets: tuple

    def __post_init__(self):
        if not self.snippets:
            raise EmptyPhi(f"no snippets for class {self.class_id}")
        for s in self.snippets:
            if self.class_id not in s.class_ids:
                raise EmptyPhi(f"snippet {s.text!r} does not reference class {self.class_id}")


def build_phi(class_id: int, vocab: ClassVocabulary, parsed: ParsedImage) -> ConceptSetPhi:
    """Class name forms plus every class-related compound of the image that mentions the class."""
    entry = vocab.entries[class_id]
    snippets: List[Snippet] = []
    seen = set()
    for form in entry.forms:
        if form not in seen:
            seen.add(form)
            snippets.append(Snippet(form, SnippetKind.CLASS_NAME, frozenset([class_id])))
    for s in parsed.compounds():
        if s.kind == SnippetKind.CLASS_RELATED and class_id in s.class_ids and s.tokens not in seen:
            seen.add(s.tokens)
            snippets.append(s)
    return ConceptSetPhi(class_id, tuple(snippets))


def tam(E_vis: VisualEmbeddingMap, e_txt: Union[TextEmbedding, np.ndarray]) -> ActivationMap:
    vector = e_txt.e_txt if isinstance(e_txt, TextEmbedding) else np.asarray(e_txt, dtype=np.float64)
    if vector.shape != (E_vis.dim,):
        raise DimMismatch(E_vis.dim, vector.shape[-1] if vector.ndim else 0, "text embedding dimension")
    return ActivationMap(E_vis.height, E_vis.width, E_vis.data @ vector, MapKind.RAW)


def tam_matrix(E_vis: VisualEmbeddingMap, e_txt: np.ndarray) -> np.ndarray:
    """TAMs of several snippets at once: (P x dim) @ (S x dim)^T -> P x S."""
    e_txt = np.atleast_2d(e_txt)
    if e_txt.shape[1] != E_vis.dim:
        raise DimMismatch(E_vis.dim, e_txt.shape[1], "text embedding dimension")
    return E_vis.data @ e_txt.T


def normalize_values(x: np.ndarray) -> np.ndarray:
    """sqrt(relu(x)) scaled so its maximum is 1, all zeros if nothing is positive."""
    root = np.sqrt(np.maximum(x, 0.0))
    peak = root.max() if root.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(root)
    return root / peak


def normalize_tam(x: ActivationMap) -> ActivationMap:
    return ActivationMap(x.height, x.width, normalize_values(x.values), MapKind.NORMALIZED)


def cam(norm_tams: Sequence[ActivationMap]) -> ActivationMap:
    if not norm_tams:
        raise EmptyPhi("cannot fuse an empty list of TAMs")
    first = norm_tams[0]
    for m in norm_tams[1:]:
        if not m.same_shape(first):
            raise DimMismatch((first.height, first.width), (m.height, m.width), "TAM size")
    values = np.max(np.stack([m.values for m in norm_tams]), axis=0)
    return ActivationMap(first.height, first.width, values, MapKind.NORMALIZED)


def _check_same_shape(maps: Sequence[ActivationMap]) -> None:
    first = maps[0]
    for m in maps[1:]:
        if not m.same_shape(first):
            raise DimMismatch((first.height, first.width), (m.height, m.width), "activation map size")


def background_map(cams: Mapping[int, ActivationMap], alpha: float = DEFAULT_ALPHA) -> ActivationMap:
    """
    b(p) = (1 - max_c y(c, p))^alpha over the present classes.

    The maps passed in decide the reading: CAMs for inference, normalized
    class-name TAMs inside the auto-consistency loss.
    """
    if not cams:
        raise NoPresentClasses("background map needs at least one present class")
    maps = [cams[c] for c in sorted(cams)]
    _check_same_shape(maps)
    peak = np.max(np.stack([m.values for m in maps]), axis=0)
    values = np.clip(1.0 - peak, 0.0, 1.0) ** alpha
    return ActivationMap(maps[0].height, maps[0].width, values, MapKind.BACKGROUND)


def argmax_labels(class_values: np.ndarray, class_ids: Sequence[int], bg_values: np.ndarray) -> np.ndarray:
    """
    Per-pixel argmax over class rows followed by the background row.

    class_values is C x P with rows ordered by ascending class id, so ties go
    to the lowest class id and never to background.
    """
    stacked = np.vstack([class_values, bg_values[None, :]])
    winner = np.argmax(stacked, axis=0)
    lookup = np.array([c + 1 for c in class_ids] + [BACKGROUND], dtype=np.int64)
    return lookup[winner]


def estimate_labels(cams: Mapping[int, ActivationMap], bg: ActivationMap) -> LabelMap:
    if not cams:
        raise NoPresentClasses("label estimation needs at least one present class")
    class_ids = sorted(cams)
    maps = [cams[c] for c in class_ids]
    _check_same_shape(maps + [bg])
    labels = argmax_labels(np.stack([m.values for m in maps]), class_ids, bg.values)
    return LabelMap(bg.height, bg.width, labels)


def class_activation_maps(
    E_vis: VisualEmbeddingMap,
    phis: Sequence[ConceptSetPhi],
    embeddings: Mapping[tuple, np.ndarray],
) -> Dict[int, ActivationMap]:
    """CAM per class from precomputed e_txt vectors keyed by snippet tokens."""
    result = {}
    for phi in phis:
        maps = [normalize_tam(tam(E_vis, embeddings[s.tokens])) for s in phi.snippets if s.tokens in embeddings]
        result[phi.class_id] = cam(maps)
    return result
