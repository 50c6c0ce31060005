"""Free-text cleanup, per-word script classification, and knowledge masks.

A knowledge mask assigns every subword token the 1-based index of the
domain-knowledge word it belongs to (0 = none). Which words count as
knowledge is a policy: by default every Latin-script word, optionally
only words found in the domain lexicon.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import ValidationError
from .bpe import TokenizedInput

# Hangul syllables plus combining jamo.
DEFAULT_LOCAL_RANGES: tuple[tuple[int, int], ...] = ((0xAC00, 0xD7A3), (0x1100, 0x11FF))


class Script(enum.Enum):
    LOCAL = "local"
    DOMAIN_LATIN = "domain_latin"
    OTHER = "other"


class MaskPolicy(enum.Enum):
    ALL_DOMAIN_SCRIPT = "all-domain"
    LEXICON_ONLY = "lexicon"


@dataclass(frozen=True)
class WordAnnotation:
    surface: str
    script: Script
    is_lexicon_term: bool


class Lexicon:
    """Set of lowercase single-word domain terms."""

    def __init__(self, terms: Sequence[str]):
        cleaned = set()
        for term in terms:
            term = term.strip()
            if not term:
                continue
            if any(ch.isspace() for ch in term):
                raise ValidationError(f"lexicon term contains whitespace: {term!r}")
            cleaned.add(term.lower())
        self._terms = frozenset(cleaned)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self._terms

    def __len__(self) -> int:
        return len(self._terms)

    def __iter__(self):
        return iter(sorted(self._terms))

    @staticmethod
    def from_file(path: str | Path) -> "Lexicon":
        terms = []
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.strip()
            if line and not line.startswith("#"):
                terms.append(line)
        return Lexicon(terms)

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(sorted(self._terms)) + "\n", encoding="utf-8")


def _is_latin(ch: str) -> bool:
    return ("a" <= ch <= "z") or ("A" <= ch <= "Z")


def _is_local(ch: str, ranges: tuple[tuple[int, int], ...]) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in ranges)


def _char_class(ch: str, ranges: tuple[tuple[int, int], ...]) -> str:
    if _is_latin(ch):
        return "latin"
    if _is_local(ch, ranges):
        return "local"
    if ch.isdigit():
        return "digit"
    return "symbol"


def preprocess(raw: str,
               local_ranges: tuple[tuple[int, int], ...] = DEFAULT_LOCAL_RANGES) -> str:
    """Strip newlines, split runs of differing character classes with single
    spaces, collapse whitespace. Idempotent."""
    text = raw.replace("\r", " ").replace("\n", " ")
    out: list[str] = []
    prev_class = None
    for ch in text:
        if ch.isspace():
            out.append(" ")
            prev_class = None
            continue
        cls = _char_class(ch, local_ranges)
        if prev_class is not None and cls != prev_class:
            out.append(" ")
        out.append(ch)
        prev_class = cls
    return " ".join("".join(out).split())


def classify_words(text: str, lexicon: Lexicon,
                   local_ranges: tuple[tuple[int, int], ...] = DEFAULT_LOCAL_RANGES
                   ) -> list[WordAnnotation]:
    """One annotation per whitespace-delimited word of preprocessed text.

    Any Latin letter makes a word DOMAIN_LATIN (mixed-script words keep the
    Latin reading); otherwise a local-range character makes it LOCAL;
    digits, symbols and other scripts are OTHER.
    """
    annotations = []
    for word in text.split():
        if any(_is_latin(ch) for ch in word):
            script = Script.DOMAIN_LATIN
        elif any(_is_local(ch, local_ranges) for ch in word):
            script = Script.LOCAL
        else:
            script = Script.OTHER
        annotations.append(WordAnnotation(word, script, word in lexicon))
    return annotations


@dataclass
class KnowledgeMask:
    """Per-token knowledge-word index: 0 on non-knowledge, special and pad
    positions; tokens of knowledge word j (1-based, order of appearance)
    all carry value j."""

    values: np.ndarray
    k: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def knowledge_positions(self) -> np.ndarray:
        return np.flatnonzero(self.values > 0)


def is_knowledge_word(annotation: WordAnnotation, policy: MaskPolicy) -> bool:
    if policy is MaskPolicy.LEXICON_ONLY:
        return annotation.is_lexicon_term
    return annotation.script is Script.DOMAIN_LATIN


def build_mask(tok: TokenizedInput, annotations: Sequence[WordAnnotation],
               policy: MaskPolicy = MaskPolicy.ALL_DOMAIN_SCRIPT) -> KnowledgeMask:
    """Number the knowledge words present in the token sequence 1..k and
    stamp each of their subword tokens. Truncated-away words get no number."""
    word_ids = tok.word_ids
    present = word_ids[word_ids >= 0]
    if present.size and int(present.max()) >= len(annotations):
        raise ValidationError(
            f"word_id {int(present.max())} has no annotation "
            f"(got {len(annotations)} annotations)")
    values = np.zeros(len(tok), dtype=np.int64)
    index_of_word: dict[int, int] = {}
    k = 0
    for pos, wid in enumerate(word_ids):
        if wid < 0:
            continue
        if not is_knowledge_word(annotations[wid], policy):
            continue
        if wid not in index_of_word:
            k += 1
            index_of_word[int(wid)] = k
        values[pos] = index_of_word[int(wid)]
    return KnowledgeMask(values, k)
