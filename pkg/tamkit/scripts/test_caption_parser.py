"""
Tests for caption parsing: tokenization, snippet segmentation, class tags and concept selection.
"""

import json
import sys
import tempfile
from pathlib import Path

import pytest

# Add scripts directory to path for imports (needed for pytest)
scripts_dir = Path(__file__).parent
if str(scripts_dir) not in sys.path:
    sys.path.insert(0, str(scripts_dir))

# Import after path setup
from caption_parser import (  # noqa: E402
    DATA_DIR,
    EOS,
    ClassVocabulary,
    Lexicon,
    SnippetKind,
    classify_snippet,
    enumerate_class_snippets,
    extract_class_tags,
    load_caption_corpus,
    load_irregulars,
    load_lexicon,
    load_vocabulary,
    parse_caption,
    parse_corpus,
    parse_image,
    pluralize,
    segment_snippets,
    select_concepts,
    tokenize,
    write_vocabulary,
)
from errors import ConfigError, CorpusError, LexiconError, VocabularyError  # noqa: E402

FIXTURES = DATA_DIR / "fixtures"


@pytest.fixture(scope="module")
def lexicon():
    return load_lexicon()


@pytest.fixture(scope="module")
def vocab():
    return load_vocabulary(FIXTURES / "caption_vocab.tsv", load_irregulars())


def test_tokenize_basic():
    assert tokenize("A dog's leash, tied!") == ["a", "dog", "leash", "tied", EOS]
    assert tokenize("high-tech meter") == ["high", "tech", "meter"]
    assert tokenize("Stop... now?!") == ["stop", EOS, "now", EOS]
    assert tokenize("") == []


def test_segment_snippets_fig1_caption(lexicon):
    tokens = tokenize("There are two large beds located in a hotel room")
    assert segment_snippets(tokens, lexicon) == [["there"], ["two", "large", "beds"], ["a", "hotel", "room"]]


def test_segment_snippets_adjacent_delimiters_yield_no_empty_segments(lexicon):
    tokens = tokenize("sitting on the bed. on top")
    segments = segment_snippets(tokens, lexicon)
    assert all(segments)
    assert segments == [["the", "bed"], ["top"]]


def test_classify_snippet_word_count_ignores_articles(vocab, lexicon):
    assert classify_snippet(["a", "dog"], vocab, lexicon) is None
    assert classify_snippet(["a", "the", "dog"], vocab, lexicon) is None

    kind, classes = classify_snippet(["two", "large", "beds"], vocab, lexicon)
    assert kind == SnippetKind.CLASS_RELATED
    assert classes == frozenset([vocab.class_id("bed")])

    kind, classes = classify_snippet(["a", "hotel", "room"], vocab, lexicon)
    assert kind == SnippetKind.CLASS_UNRELATED
    assert classes == frozenset()


def test_multiword_class_name_and_plural(vocab, lexicon):
    snippets = parse_caption("Two parking meters on a city street.", 0, vocab, lexicon)
    assert [s.tokens for s in snippets] == [("two", "parking", "meters"), ("a", "city", "street")]
    assert snippets[0].class_ids == frozenset([vocab.class_id("parking meter")])


def test_irregular_plural_tags(vocab):
    tags = extract_class_tags(["Three people riding bicycles down a busy street."], vocab)
    assert tags == {vocab.class_id("person"), vocab.class_id("bicycle")}
    assert extract_class_tags(["two mice"], vocab) == {vocab.class_id("mouse")}


def test_tags_are_not_substring_matches(vocab):
    # "bedroom" must not tag "bed", "cats" tags "cat"
    assert extract_class_tags(["a bedroom"], vocab) == set()
    assert extract_class_tags(["cats resting"], vocab) == {vocab.class_id("cat")}


def test_pluralize_rules():
    irregulars = load_irregulars()
    assert pluralize("bus") == "buses"
    assert pluralize("pony") == "ponies"
    assert pluralize("toy") == "toys"
    assert pluralize("person", irregulars) == "people"
    assert pluralize("parking meter") == "parking meters"
    assert pluralize("wine glass") == "wine glasses"
    with pytest.raises(VocabularyError):
        pluralize("  ")


def test_enumerate_class_snippets_two_forms_per_class(vocab):
    snippets = enumerate_class_snippets(vocab)
    assert len(snippets) == 2 * len(vocab)
    assert all(s.kind == SnippetKind.CLASS_NAME for s in snippets)
    assert snippets[0].tokens == ("person",) and snippets[1].tokens == ("people",)


def test_parse_corpus_matches_expected_fixture(vocab, lexicon):
    """Every record of the bundled corpus parses exactly to the checked-in expectation."""
    parsed = parse_corpus(load_caption_corpus(FIXTURES / "captions.jsonl"), vocab, lexicon)
    with open(FIXTURES / "expected_parsed.jsonl", "r", encoding="utf-8") as f:
        expected = [json.loads(line) for line in f if line.strip()]

    assert len(parsed) == len(expected)
    for got, want in zip(parsed, expected):
        assert got.to_dict(vocab) == want, got.image_id


def test_fixture_corpus_has_twenty_captions():
    records = load_caption_corpus(FIXTURES / "captions.jsonl")
    assert sum(len(c) for _, c in records) == 20


def test_compounds_deduplicate_repeated_snippets(vocab, lexicon):
    parsed = parse_image(
        "beds",
        ["A hotel room with two beds.", "A hotel room near a window."],
        vocab,
        lexicon,
    )
    texts = [s.text for s in parsed.compounds()]
    assert texts.count("a hotel room") == 1
    assert len(parsed.snippets) == len(texts) + 1


def test_image_without_classes_has_no_tags(vocab, lexicon):
    parsed = parse_image("empty", ["A picture of some shapes."], vocab, lexicon)
    assert parsed.tags == set()
    assert all(s.kind != SnippetKind.CLASS_RELATED for s in parsed.snippets)


class TestSelectConcepts:
    def _compounds(self, vocab, lexicon):
        return parse_image(
            "x",
            ["A large pizza topped with cheese and mushrooms!", "a white plate"],
            vocab,
            lexicon,
        ).compounds()

    def test_all_compounds_is_identity(self, vocab, lexicon):
        compounds = self._compounds(vocab, lexicon)
        assert select_concepts(compounds, "all_compounds", lexicon) == compounds

    def test_class_related_only(self, vocab, lexicon):
        selected = select_concepts(self._compounds(vocab, lexicon), "class_related", lexicon)
        assert [s.text for s in selected] == ["a large pizza"]

    def test_no_adjectives_drops_adjectives_and_empty_results(self, vocab, lexicon):
        selected = select_concepts(self._compounds(vocab, lexicon), "no_adjectives", lexicon)
        # "a white plate" -> "a plate" survives with one content word
        assert [s.text for s in selected] == ["a pizza", "cheese and mushrooms", "a plate"]
        assert selected[0].kind == SnippetKind.CLASS_RELATED

    def test_all_concepts_adds_single_words(self, vocab, lexicon):
        selected = select_concepts(self._compounds(vocab, lexicon), "all_concepts", lexicon)
        words = [s.text for s in selected if s.kind == SnippetKind.WORD]
        assert words == ["large", "pizza", "cheese", "mushrooms", "white", "plate"]
        assert len({s.tokens for s in selected}) == len(selected)

    def test_all_concepts_skips_numerals_and_function_words(self, vocab, lexicon):
        compounds = parse_image("x", ["Two large beds in a hotel room."], vocab, lexicon).compounds()
        selected = select_concepts(compounds, "all_concepts", lexicon)
        words = [s.text for s in selected if s.kind == SnippetKind.WORD]
        assert words == ["large", "beds", "hotel", "room"]
        for token in ("and", "or", "two", "12", "in", "a"):
            assert not lexicon.is_concept_word(token)
        assert lexicon.is_concept_word("hotel")

    def test_unknown_mode(self, vocab, lexicon):
        with pytest.raises(ConfigError):
            select_concepts(self._compounds(vocab, lexicon), "nouns_only", lexicon)


def test_lexicon_rejects_overlapping_word_classes():
    with pytest.raises(LexiconError):
        Lexicon(prepositions=frozenset(["on"]), verbs=frozenset(["on"]), articles=frozenset(["a"]))
    with pytest.raises(LexiconError):
        Lexicon(prepositions=frozenset(["On"]), verbs=frozenset(), articles=frozenset(["a"]))


def test_vocabulary_requires_contiguous_ids():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "vocab.tsv"
        path.write_text("0\tdog\tdogs\n2\tcat\tcats\n", encoding="utf-8")
        with pytest.raises(VocabularyError):
            load_vocabulary(path)


def test_vocabulary_fills_missing_plural():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "vocab.tsv"
        path.write_text("0\tbus\n1\tmouse\n", encoding="utf-8")
        vocab = load_vocabulary(path, load_irregulars())
        assert [e.plural for e in vocab] == ["buses", "mice"]


def test_missing_vocabulary_file_names_path():
    with pytest.raises(VocabularyError, match="nope.tsv"):
        load_vocabulary(Path("/nonexistent/nope.tsv"))


def test_corpus_errors_carry_line_numbers():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "captions.jsonl"
        path.write_text('{"image_id": "a", "captions": ["x"]}\n{not json}\n', encoding="utf-8")
        with pytest.raises(CorpusError) as info:
            load_caption_corpus(path)
        assert info.value.line_no == 2

        path.write_text('{"image_id": "a", "captions": ["x"]}\n{"image_id": "a", "captions": []}\n')
        with pytest.raises(CorpusError, match="duplicate"):
            load_caption_corpus(path)


def test_empty_corpus_is_valid():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "captions.jsonl"
        path.write_text("", encoding="utf-8")
        assert load_caption_corpus(path) == []


def test_vocabulary_from_names():
    vocab = ClassVocabulary.from_names(["square", "circle"])
    assert vocab.names() == ["square", "circle"]
    assert vocab.entries[1].plural == "circles"


def test_vocabulary_categories(vocab):
    categories = vocab.categories()
    assert categories["animal"] == [vocab.class_id("dog"), vocab.class_id("cat")]
    assert categories["vehicle"] == [1, 2, 3]
    assert sorted(c for ids in categories.values() for c in ids) == list(range(len(vocab)))
    assert ClassVocabulary.from_names(["square", "circle"]).categories() == {}


def test_vocabulary_category_column_is_optional():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "vocab.tsv"
        path.write_text("0\tdog\tdogs\tanimal\n1\tbus\t\tvehicle\n2\tbed\n", encoding="utf-8")
        vocab = load_vocabulary(path, load_irregulars())
        assert [e.category for e in vocab] == ["animal", "vehicle", ""]
        assert vocab.entries[1].plural == "buses"

        copy = Path(tmpdir) / "copy.tsv"
        write_vocabulary(vocab, copy)
        assert load_vocabulary(copy) == vocab
        assert copy.read_text(encoding="utf-8").splitlines()[2] == "2\tbed\tbeds"
