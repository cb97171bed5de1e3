#!/usr/bin/env python3
"""
Caption parser for tamkit.

Turns raw image captions into snippets: class names, class-related compound
concepts and class-unrelated compound concepts. Compound concepts are the
stretches of a sentence between sentence boundaries, prepositions and verbs
that keep at least two words once articles are ignored.

Word lists (prepositions, verbs, articles, adjectives) are data files under
tamkit/data/lexicon, one lowercase word per line.

Usage:
    python tamkit/scripts/caption_parser.py --captions captions.jsonl --vocab vocab.tsv
"""

import argparse
import enum
import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

# Import sibling modules
sys.path.insert(0, str(Path(__file__).parent))
from errors import ConfigError, CorpusError, LexiconError, TamkitError, VocabularyError

DATA_DIR = Path(__file__).resolve().parent.parent / "data"
DEFAULT_LEXICON_DIR = DATA_DIR / "lexicon"
DEFAULT_IRREGULARS = DATA_DIR / "irregulars.txt"

EOS = "<eos>"
DEFAULT_SENTENCE_DELIMITERS = frozenset(".!?;")
# words that never stand alone as a concept in the all_concepts mode
CONJUNCTIONS = frozenset(["and", "or", "nor", "but"])
NUMBER_WORDS = frozenset(
    ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve"]
)

_POSSESSIVE = re.compile(r"'s\b")
_TOKEN = re.compile(r"[a-z0-9]+|[.!?;]")


@dataclass(frozen=True)
class Lexicon:
    """Closed word classes used to cut captions into snippets."""

    prepositions: FrozenSet[str]
    verbs: FrozenSet[str]
    articles: FrozenSet[str]
    sentence_delimiters: FrozenSet[str] = DEFAULT_SENTENCE_DELIMITERS
    adjectives: FrozenSet[str] = frozenset()

    def __post_init__(self):
        if not self.prepositions:
            raise LexiconError("lexicon has no prepositions")
        if not self.articles:
            raise LexiconError("lexicon has no articles")

        word_sets = {
            "prepositions": self.prepositions,
            "verbs": self.verbs,
            "articles": self.articles,
            "adjectives": self.adjectives,
        }
        for name, words in word_sets.items():
            upper = sorted(w for w in words if w != w.lower())
            if upper:
                raise LexiconError(f"{name} must be lowercase: {upper[:5]}")

        names = list(word_sets)
        for i, first in enumerate(names):
            for second in names[i + 1:]:
                shared = word_sets[first] & word_sets[second]
                if shared:
                    raise LexiconError(
                        f"{first} and {second} overlap: {sorted(shared)[:5]}"
                    )

    def is_delimiter(self, token: str) -> bool:
        return token == EOS or token in self.prepositions or token in self.verbs

    def is_concept_word(self, token: str) -> bool:
        """True for a word that can stand alone as a one-word concept."""
        if self.is_delimiter(token) or token in self.articles:
            return False
        return token not in CONJUNCTIONS and token not in NUMBER_WORDS and not token.isdigit()


def _read_word_list(path: Path) -> FrozenSet[str]:
    if not path.exists():
        raise LexiconError(f"word list not found: {path}")
    words = set()
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            word = line.strip()
            if not word or word.startswith("#"):
                continue
            words.add(word)
    return frozenset(words)


def load_lexicon(lexicon_dir: Optional[Path] = None) -> Lexicon:
    """
    Load a lexicon from a directory of word lists.

    Expects prepositions.txt, verbs.txt and articles.txt; adjectives.txt is optional.
    """
    lexicon_dir = Path(lexicon_dir) if lexicon_dir else DEFAULT_LEXICON_DIR
    if not lexicon_dir.is_dir():
        raise LexiconError(f"lexicon directory not found: {lexicon_dir}")

    adjectives_path = lexicon_dir / "adjectives.txt"
    return Lexicon(
        prepositions=_read_word_list(lexicon_dir / "prepositions.txt"),
        verbs=_read_word_list(lexicon_dir / "verbs.txt"),
        articles=_read_word_list(lexicon_dir / "articles.txt"),
        adjectives=_read_word_list(adjectives_path) if adjectives_path.exists() else frozenset(),
    )


def load_irregulars(path: Optional[Path] = None) -> Dict[str, str]:
    """Load singular<TAB>plural overrides for pluralize()."""
    path = Path(path) if path else DEFAULT_IRREGULARS
    if not path.exists():
        raise VocabularyError(f"irregulars file not found: {path}")
    table = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise VocabularyError(f"{path}:{line_no}: expected 'singular<TAB>plural'")
            table[parts[0].strip().lower()] = parts[1].strip().lower()
    return table


def pluralize(singular: str, irregulars: Optional[Dict[str, str]] = None) -> str:
    """English plural of a (possibly multi-word) class name; the last word is inflected."""
    singular = singular.strip().lower()
    if not singular:
        raise VocabularyError("cannot pluralize an empty word")
    if irregulars and singular in irregulars:
        return irregulars[singular]

    head, _, last = singular.rpartition(" ")
    if irregulars and last in irregulars:
        plural_last = irregulars[last]
    elif last.endswith(("s", "x", "z", "ch", "sh")):
        plural_last = last + "es"
    elif len(last) > 1 and last.endswith("y") and last[-2] not in "aeiou":
        plural_last = last[:-1] + "ies"
    else:
        plural_last = last + "s"
    return f"{head} {plural_last}" if head else plural_last


@dataclass(frozen=True)
class VocabularyEntry:
    class_id: int
    singular: str
    plural: str
    # optional grouping used by tag-retrieval metrics, "" when absent
    category: str = ""

    @property
    def forms(self) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
        return tuple(self.singular.split()), tuple(self.plural.split())


@dataclass(frozen=True)
class ClassVocabulary:
    """Classes of interest with their singular and plural surface forms."""

    entries: Tuple[VocabularyEntry, ...]

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.class_id))
        ids = [e.class_id for e in entries]
        if ids != list(range(len(ids))):
            raise VocabularyError(f"class ids must be unique and contiguous from 0, got {ids}")
        object.__setattr__(self, "entries", entries)
        for e in self.entries:
            if not e.singular.strip() or not e.plural.strip():
                raise VocabularyError(f"class {e.class_id} has an empty singular or plural form")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def name(self, class_id: int) -> str:
        return self.entries[class_id].singular

    def names(self) -> List[str]:
        return [e.singular for e in self.entries]

    def categories(self) -> Dict[str, List[int]]:
        """Class ids per category in order of first appearance; empty without categories."""
        groups: Dict[str, List[int]] = {}
        for e in self.entries:
            if e.category:
                groups.setdefault(e.category, []).append(e.class_id)
        return groups

    def class_id(self, name: str) -> int:
        for e in self.entries:
            if e.singular == name:
                return e.class_id
        raise VocabularyError(f"unknown class name {name!r}")

    def surface_forms(self) -> List[Tuple[Tuple[str, ...], int]]:
        """All (token sequence, class_id) pairs, longest sequences first."""
        forms = []
        for e in self.entries:
            for form in e.forms:
                forms.append((form, e.class_id))
        forms.sort(key=lambda item: (-len(item[0]), item[1]))
        return forms

    @classmethod
    def from_names(
        cls, singulars: Sequence[str], irregulars: Optional[Dict[str, str]] = None
    ) -> "ClassVocabulary":
        entries = tuple(
            VocabularyEntry(i, s.lower(), pluralize(s, irregulars)) for i, s in enumerate(singulars)
        )
        return cls(entries)


def load_vocabulary(path: Path, irregulars: Optional[Dict[str, str]] = None) -> ClassVocabulary:
    """
    Load a vocabulary file: one 'class_id<TAB>singular<TAB>plural<TAB>category' per line.

    The plural column may be omitted or left empty, in which case pluralize()
    fills it in. The category column is optional.
    """
    path = Path(path)
    if not path.exists():
        raise VocabularyError(f"vocabulary file not found: {path}")

    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = [p.strip().lower() for p in line.split("\t")]
            if len(parts) not in (2, 3, 4):
                raise VocabularyError(
                    f"{path}:{line_no}: expected 'class_id<TAB>singular<TAB>plural<TAB>category'"
                )
            try:
                class_id = int(parts[0])
            except ValueError:
                raise VocabularyError(f"{path}:{line_no}: class id {parts[0]!r} is not an integer")
            plural = parts[2] if len(parts) >= 3 and parts[2] else pluralize(parts[1], irregulars)
            category = parts[3] if len(parts) == 4 else ""
            entries.append(VocabularyEntry(class_id, parts[1], plural, category))

    return ClassVocabulary(tuple(entries))


def write_vocabulary(vocab: ClassVocabulary, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in vocab:
            suffix = f"\t{e.category}" if e.category else ""
            f.write(f"{e.class_id}\t{e.singular}\t{e.plural}{suffix}\n")


class SnippetKind(enum.Enum):
    CLASS_NAME = "class_name"
    CLASS_RELATED = "class_related"
    CLASS_UNRELATED = "class_unrelated"
    # one-word concept, only produced for the all_concepts ablation
    WORD = "word"


@dataclass(frozen=True)
class Snippet:
    """A classified caption fragment."""

    tokens: Tuple[str, ...]
    kind: SnippetKind
    class_ids: FrozenSet[int] = frozenset()
    source_caption: int = -1

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_dict(self, vocab: Optional[ClassVocabulary] = None) -> Dict[str, Any]:
        """Convert to dictionary, naming classes when a vocabulary is given."""
        classes: List[Any] = sorted(self.class_ids)
        if vocab is not None:
            classes = [vocab.name(c) for c in classes]
        return {
            "tokens": list(self.tokens),
            "kind": self.kind.value,
            "classes": classes,
            "caption": self.source_caption,
        }


def tokenize(caption: str) -> List[str]:
    """
    Lowercase a caption and split it into words.

    Hyphenated words are split, a possessive 's is dropped and all punctuation
    except sentence delimiters is removed. Each run of delimiters becomes one
    EOS marker.
    """
    text = _POSSESSIVE.sub("", caption.lower())
    text = text.replace("'", "").replace("-", " ")

    tokens: List[str] = []
    for token in _TOKEN.findall(text):
        if token in DEFAULT_SENTENCE_DELIMITERS:
            if tokens and tokens[-1] != EOS:
                tokens.append(EOS)
            continue
        tokens.append(token)
    return tokens


def segment_snippets(tokens: Sequence[str], lexicon: Lexicon) -> List[List[str]]:
    """Split tokens at prepositions, verbs and sentence ends; delimiters are dropped."""
    segments: List[List[str]] = []
    current: List[str] = []
    for token in tokens:
        if lexicon.is_delimiter(token):
            if current:
                segments.append(current)
            current = []
        else:
            current.append(token)
    if current:
        segments.append(current)
    return segments


def find_classes(tokens: Sequence[str], vocab: ClassVocabulary) -> Set[int]:
    """Class ids whose singular or plural form occurs as a contiguous token run."""
    found = set()
    tokens = tuple(tokens)
    for form, class_id in vocab.surface_forms():
        n = len(form)
        for start in range(len(tokens) - n + 1):
            if tokens[start:start + n] == form:
                found.add(class_id)
                break
    return found


def content_words(tokens: Iterable[str], lexicon: Lexicon) -> List[str]:
    return [t for t in tokens if t not in lexicon.articles]


def classify_snippet(
    segment: Sequence[str],
    vocab: ClassVocabulary,
    lexicon: Lexicon,
) -> Optional[Tuple[SnippetKind, FrozenSet[int]]]:
    """
    Classify a segment as a class-related or class-unrelated compound.

    Returns None (discard) when fewer than two non-article words remain.
    Class names on their own come from enumerate_class_snippets().
    """
    if len(content_words(segment, lexicon)) < 2:
        return None
    class_ids = find_classes(segment, vocab)
    if class_ids:
        return SnippetKind.CLASS_RELATED, frozenset(class_ids)
    return SnippetKind.CLASS_UNRELATED, frozenset()


def enumerate_class_snippets(vocab: ClassVocabulary) -> List[Snippet]:
    """One class-name snippet per class and surface form (singular first)."""
    snippets = []
    for e in vocab:
        for form in e.forms:
            snippets.append(Snippet(form, SnippetKind.CLASS_NAME, frozenset([e.class_id])))
    return snippets


def extract_class_tags(captions: Sequence[str], vocab: ClassVocabulary) -> Set[int]:
    """A class is present if its name or plural appears in at least one caption."""
    tags: Set[int] = set()
    for caption in captions:
        tags |= find_classes(tokenize(caption), vocab)
    return tags


def parse_caption(
    caption: str,
    caption_index: int,
    vocab: ClassVocabulary,
    lexicon: Lexicon,
) -> List[Snippet]:
    snippets = []
    for segment in segment_snippets(tokenize(caption), lexicon):
        classified = classify_snippet(segment, vocab, lexicon)
        if classified is None:
            continue
        kind, class_ids = classified
        snippets.append(Snippet(tuple(segment), kind, class_ids, caption_index))
    return snippets


@dataclass
class ParsedImage:
    """Tags and compound snippets harvested from one image's captions."""

    image_id: str
    captions: List[str]
    tags: Set[int]
    snippets: List[Snippet] = field(default_factory=list)

    def compounds(self) -> List[Snippet]:
        """Compound snippets with duplicate token sequences collapsed, first occurrence kept."""
        seen = set()
        unique = []
        for s in self.snippets:
            if s.tokens in seen:
                continue
            seen.add(s.tokens)
            unique.append(s)
        return unique

    def caption_tokens(self) -> List[List[str]]:
        return [tokenize(c) for c in self.captions]

    def to_dict(self, vocab: ClassVocabulary) -> Dict[str, Any]:
        return {
            "image_id": self.image_id,
            "tags": [vocab.name(c) for c in sorted(self.tags)],
            "snippets": [s.to_dict(vocab) for s in self.snippets],
        }


def parse_image(
    image_id: str,
    captions: Sequence[str],
    vocab: ClassVocabulary,
    lexicon: Lexicon,
) -> ParsedImage:
    snippets: List[Snippet] = []
    for i, caption in enumerate(captions):
        snippets.extend(parse_caption(caption, i, vocab, lexicon))
    return ParsedImage(
        image_id=image_id,
        captions=list(captions),
        tags=extract_class_tags(captions, vocab),
        snippets=snippets,
    )


def load_caption_corpus(path: Path) -> List[Tuple[str, List[str]]]:
    """
    Load a caption corpus from JSONL: {"image_id": str, "captions": [str, ...]} per line.

    Raises CorpusError with the line number on malformed records.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError("caption file not found", str(path))

    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"invalid JSON ({e.msg})", str(path), line_no)
            if not isinstance(record, dict):
                raise CorpusError("record must be a JSON object", str(path), line_no)
            image_id = record.get("image_id")
            captions = record.get("captions")
            if not isinstance(image_id, str) or not image_id:
                raise CorpusError("missing string field 'image_id'", str(path), line_no)
            if not isinstance(captions, list) or not all(isinstance(c, str) for c in captions):
                raise CorpusError("field 'captions' must be a list of strings", str(path), line_no)
            if image_id in seen:
                raise CorpusError(f"duplicate image_id {image_id!r}", str(path), line_no)
            seen.add(image_id)
            records.append((image_id, captions))
    return records


def parse_corpus(
    records: Sequence[Tuple[str, Sequence[str]]],
    vocab: ClassVocabulary,
    lexicon: Lexicon,
) -> List[ParsedImage]:
    return [parse_image(image_id, captions, vocab, lexicon) for image_id, captions in records]


def select_concepts(
    compounds: Sequence[Snippet],
    mode: str,
    lexicon: Lexicon,
) -> List[Snippet]:
    """
    Pick the concepts that feed the concepts loss.

    Modes: all_compounds, class_related, no_adjectives, all_concepts.
    """
    if mode == "all_compounds":
        return list(compounds)
    if mode == "class_related":
        return [s for s in compounds if s.kind == SnippetKind.CLASS_RELATED]
    if mode == "no_adjectives":
        stripped = []
        seen = set()
        for s in compounds:
            tokens = tuple(t for t in s.tokens if t not in lexicon.adjectives)
            if not content_words(tokens, lexicon) or tokens in seen:
                continue
            seen.add(tokens)
            stripped.append(Snippet(tokens, s.kind, s.class_ids, s.source_caption))
        return stripped
    if mode == "all_concepts":
        concepts = list(compounds)
        seen = {s.tokens for s in compounds}
        for s in compounds:
            for word in content_words(s.tokens, lexicon):
                if (word,) in seen or not lexicon.is_concept_word(word):
                    continue
                seen.add((word,))
                concepts.append(Snippet((word,), SnippetKind.WORD, frozenset(), s.source_caption))
        return concepts
    raise ConfigError(f"unknown concept mode {mode!r}")


def main():
    parser = argparse.ArgumentParser(description="Parse captions into tags and compound snippets")
    parser.add_argument("--captions", type=Path, required=True, help="Caption corpus (JSONL)")
    parser.add_argument("--vocab", type=Path, required=True, help="Class vocabulary (TSV)")
    parser.add_argument("--lexicon-dir", type=Path, help="Directory with word lists (default: bundled)")
    args = parser.parse_args()

    try:
        vocab = load_vocabulary(args.vocab, load_irregulars())
        lexicon = load_lexicon(args.lexicon_dir)
        parsed = parse_corpus(load_caption_corpus(args.captions), vocab, lexicon)
    except TamkitError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)

    for p in parsed:
        print(json.dumps(p.to_dict(vocab), ensure_ascii=False))


if __name__ == "__main__":
    main()
