"""
Exception hierarchy for tamkit.

Library modules raise these; entry points map them to exit codes
(0 success, 2 input/config error, 3 numeric failure).
"""

from typing import Optional


class TamkitError(Exception):
    """Base class for all tamkit errors."""

    exit_code = 2


class InputError(TamkitError):
    """Malformed input files, bad configuration or violated call contracts."""

    exit_code = 2


class NumericError(TamkitError):
    """Non-finite or degenerate numbers during training or evaluation."""

    exit_code = 3


class ConfigError(InputError):
    pass


class CorpusError(InputError):
    """A caption corpus or JSONL file could not be read."""

    def __init__(self, message: str, path: Optional[str] = None, line_no: Optional[int] = None):
        self.path = path
        self.line_no = line_no
        location = ""
        if path is not None:
            location = f"{path}"
            if line_no is not None:
                location += f":{line_no}"
            location += ": "
        super().__init__(f"{location}{message}")


class LexiconError(InputError):
    pass


class VocabularyError(InputError):
    pass


class EmbeddingFormatError(InputError):
    pass


class MalformedLine(EmbeddingFormatError):
    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        message = f"malformed line {line_no}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class DuplicateWord(EmbeddingFormatError):
    def __init__(self, word: str, line_no: Optional[int] = None):
        self.word = word
        self.line_no = line_no
        super().__init__(f"duplicate word {word!r}" + (f" at line {line_no}" if line_no else ""))


class CountMismatch(EmbeddingFormatError):
    def __init__(self, expected: int, got: int):
        self.expected = expected
        self.got = got
        super().__init__(f"header announces {expected} entries, file has {got}")


class DimMismatch(InputError):
    def __init__(self, expected, got, what: str = "dimension"):
        self.expected = expected
        self.got = got
        super().__init__(f"{what} mismatch: expected {expected}, got {got}")


class ShapeMismatch(InputError):
    pass


class LabelOutOfRange(InputError):
    pass


class CheckpointError(InputError):
    pass


class MissingPairs(InputError):
    pass


class AllTokensOOV(InputError):
    def __init__(self, tokens):
        self.tokens = tuple(tokens)
        super().__init__(f"no token of {' '.join(self.tokens)!r} is in the embedding table")


class EmptyPhi(InputError):
    pass


class NoPresentClasses(InputError):
    pass


class EmptyBatch(InputError):
    pass


class EmptyMatrix(InputError):
    pass


class MissingForwardCache(InputError):
    pass


class DegenerateZero(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class NonFiniteUpdate(NumericError):
    pass
