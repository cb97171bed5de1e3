"""
Word-embedding table and textual path.

A snippet's input embedding e_w2v is the mean of the L2-normalized vectors of
its non-article, in-vocabulary words. The textual path maps it into the joint
space:

    e_txt = norm(norm(e_w2v) + w_res * norm(M_txt @ e_w2v))
"""

import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
from caption_parser import Lexicon, Snippet
from errors import (
    AllTokensOOV,
    CountMismatch,
    DegenerateZero,
    DimMismatch,
    DuplicateWord,
    EmbeddingFormatError,
    MalformedLine,
)

logger = logging.getLogger(__name__)

DEFAULT_W_RES = 0.2
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class EmbeddingTable:
    """Immutable word -> vector dictionary."""

    dim: int
    words: Tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        if self.dim <= 0:
            raise EmbeddingFormatError(f"dimension must be positive, got {self.dim}")
        if self.matrix.shape != (len(self.words), self.dim):
            raise DimMismatch((len(self.words), self.dim), self.matrix.shape, "table shape")
        if not np.all(np.isfinite(self.matrix)):
            raise EmbeddingFormatError("embedding table contains NaN or Inf")
        self.matrix.setflags(write=False)
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def __len__(self) -> int:
        return len(self.words)

    def vector(self, word: str) -> np.ndarray:
        return self.matrix[self._index[word]]

    @classmethod
    def from_dict(cls, vectors: Dict[str, Sequence[float]]) -> "EmbeddingTable":
        words = tuple(vectors)
        matrix = np.array([np.asarray(vectors[w], dtype=np.float64) for w in words], dtype=np.float64)
        dim = matrix.shape[1] if matrix.ndim == 2 else 0
        return cls(dim, words, matrix.reshape(len(words), dim))


def load_table(path: Path) -> EmbeddingTable:
    """
    Load a word2vec-style text file.

    First line "count dim", then "word v1 ... v_dim" per line.
    """
    path = Path(path)
    if not path.exists():
        raise EmbeddingFormatError(f"embedding file not found: {path}")

    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise MalformedLine(1, "expected header 'count dim'")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise MalformedLine(1, "header values must be integers")
        if count < 0 or dim <= 0:
            raise MalformedLine(1, "count must be >= 0 and dim > 0")

        words: List[str] = []
        rows: List[np.ndarray] = []
        seen = set()
        for line_no, line in enumerate(f, 2):
            parts = line.split()
            if not parts:
                continue
            word, values = parts[0], parts[1:]
            if len(values) != dim:
                raise DimMismatch(dim, len(values), f"line {line_no} vector length")
            try:
                row = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError:
                raise MalformedLine(line_no, "non-numeric vector entry")
            if not np.all(np.isfinite(row)):
                raise MalformedLine(line_no, "NaN or Inf entry")
            if word in seen:
                raise DuplicateWord(word, line_no)
            seen.add(word)
            words.append(word)
            rows.append(row)

    if len(words) != count:
        raise CountMismatch(count, len(words))

    matrix = np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float64)
    return EmbeddingTable(dim, tuple(words), matrix)


def save_table(table: EmbeddingTable, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{len(table)} {table.dim}\n")
        for word, row in zip(table.words, table.matrix):
            f.write(word + " " + " ".join(repr(float(v)) for v in row) + "\n")


def snippet_input_embedding(
    snippet, table: EmbeddingTable, lexicon: Lexicon
) -> np.ndarray:
    """
    Mean of the L2-normalized vectors of a snippet's words.

    Articles and out-of-vocabulary words are skipped. The mean itself is not
    renormalized.
    """
    tokens = snippet.tokens if isinstance(snippet, Snippet) else tuple(snippet)
    vectors = []
    for token in tokens:
        if token in lexicon.articles or token not in table:
            continue
        v = table.vector(token)
        norm = np.linalg.norm(v)
        if norm < DEGENERATE_NORM:
            continue
        vectors.append(v / norm)
    if not vectors:
        raise AllTokensOOV(tokens)
    return np.mean(vectors, axis=0)


def embed_snippets(
    snippets: Iterable[Snippet], table: EmbeddingTable, lexicon: Lexicon
) -> Tuple[List[Snippet], np.ndarray]:
    """Input embeddings for many snippets; all-OOV snippets are dropped with a warning."""
    kept: List[Snippet] = []
    rows: List[np.ndarray] = []
    for snippet in snippets:
        try:
            rows.append(snippet_input_embedding(snippet, table, lexicon))
        except AllTokensOOV:
            logger.warning("Dropping snippet %r: no token in embedding table", snippet.text)
            continue
        kept.append(snippet)
    matrix = np.vstack(rows) if rows else np.zeros((0, table.dim))
    return kept, matrix


@dataclass(frozen=True)
class TextEmbedding:
    """Output of the textual path for one snippet."""

    e_txt: np.ndarray
    e_w2v: np.ndarray


@dataclass
class TextualPathParams:
    """Fully connected weight M_txt and residual weight w_res."""

    M_txt: np.ndarray
    w_res: float = DEFAULT_W_RES

    def __post_init__(self):
        if self.M_txt.ndim != 2 or self.M_txt.shape[0] != self.M_txt.shape[1]:
            raise DimMismatch("square matrix", self.M_txt.shape, "M_txt shape")
        if not np.all(np.isfinite(self.M_txt)):
            raise EmbeddingFormatError("M_txt contains NaN or Inf")
        if self.w_res < 0:
            raise EmbeddingFormatError(f"w_res must be >= 0, got {self.w_res}")

    @property
    def dim(self) -> int:
        return self.M_txt.shape[0]


def init_textual_path(
    dim: int, w_res: float = DEFAULT_W_RES, seed: int = 0, rng: Optional[np.random.Generator] = None
) -> TextualPathParams:
    """M_txt drawn uniformly from [-1/sqrt(dim), 1/sqrt(dim)]."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    limit = 1.0 / np.sqrt(dim)
    return TextualPathParams(rng.uniform(-limit, limit, size=(dim, dim)), w_res)


@dataclass
class TextualPathCache:
    e_w2v: np.ndarray      # (S, D)
    m: np.ndarray          # (S, D) M_txt @ e_w2v
    m_norm: np.ndarray     # (S,)
    u: np.ndarray          # (S, D) norm(m), zero rows where m vanishes
    s_norm: np.ndarray     # (S,)
    e_txt: np.ndarray      # (S, D)


def textual_path_batch(
    e_w2v: np.ndarray, params: TextualPathParams
) -> Tuple[np.ndarray, TextualPathCache]:
    """Apply the textual path to each row of e_w2v (S x D)."""
    e_w2v = np.atleast_2d(np.asarray(e_w2v, dtype=np.float64))
    if e_w2v.shape[1] != params.dim:
        raise DimMismatch(params.dim, e_w2v.shape[1], "textual path input dimension")

    norms = np.linalg.norm(e_w2v, axis=1)
    if np.any(norms < DEGENERATE_NORM):
        raise DegenerateZero("textual path input has zero norm")
    a = e_w2v / norms[:, None]

    m = e_w2v @ params.M_txt.T
    m_norm = np.linalg.norm(m, axis=1)
    u = np.zeros_like(m)
    live = m_norm >= DEGENERATE_NORM
    u[live] = m[live] / m_norm[live, None]

    s = a + params.w_res * u
    s_norm = np.linalg.norm(s, axis=1)
    if np.any(s_norm < DEGENERATE_NORM):
        raise DegenerateZero("textual path sum has zero norm")
    e_txt = s / s_norm[:, None]

    return e_txt, TextualPathCache(e_w2v, m, m_norm, u, s_norm, e_txt)


def textual_path_backward(
    grad_e_txt: np.ndarray, cache: TextualPathCache, params: TextualPathParams
) -> np.ndarray:
    """Gradient of the loss with respect to M_txt given dL/de_txt (S x D)."""
    grad = np.atleast_2d(grad_e_txt)
    if params.w_res == 0:
        return np.zeros_like(params.M_txt)

    # through the outer normalization
    radial = np.sum(grad * cache.e_txt, axis=1, keepdims=True)
    grad_s = (grad - cache.e_txt * radial) / cache.s_norm[:, None]

    grad_u = params.w_res * grad_s
    live = cache.m_norm >= DEGENERATE_NORM
    grad_m = np.zeros_like(cache.m)
    radial_u = np.sum(grad_u * cache.u, axis=1, keepdims=True)
    grad_m[live] = (grad_u[live] - cache.u[live] * radial_u[live]) / cache.m_norm[live, None]

    return grad_m.T @ cache.e_w2v


def textual_path(e_w2v: np.ndarray, params: TextualPathParams) -> TextEmbedding:
    """Textual path for a single snippet."""
    e_w2v = np.asarray(e_w2v, dtype=np.float64)
    if not np.all(np.isfinite(e_w2v)):
        raise DegenerateZero("textual path input is not finite")
    e_txt, _ = textual_path_batch(e_w2v[None, :], params)
    return TextEmbedding(e_txt=e_txt[0], e_w2v=e_w2v)


class SnippetBank:
    """
    Cache of input embeddings keyed by token sequence.

    Built once per corpus; snippets whose words are all out of vocabulary are
    remembered as missing and skipped by callers.
    """

    def __init__(self, table: EmbeddingTable, lexicon: Lexicon):
        self.table = table
        self.lexicon = lexicon
        self._vectors: Dict[Tuple[str, ...], Optional[np.ndarray]] = {}

    @property
    def dim(self) -> int:
        return self.table.dim

    def get(self, snippet: Snippet) -> Optional[np.ndarray]:
        key = snippet.tokens
        if key not in self._vectors:
            try:
                self._vectors[key] = snippet_input_embedding(snippet, self.table, self.lexicon)
            except AllTokensOOV:
                logger.warning("Dropping snippet %r: no token in embedding table", snippet.text)
                self._vectors[key] = None
        return self._vectors[key]

    def filter(self, snippets: Iterable[Snippet]) -> List[Snippet]:
        return [s for s in snippets if self.get(s) is not None]

    def matrix(self, snippets: Sequence[Snippet]) -> np.ndarray:
        """Stack input embeddings of snippets already passed through filter()."""
        if not snippets:
            return np.zeros((0, self.dim))
        return np.vstack([self.get(s) for s in snippets])
