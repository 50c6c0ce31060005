"""Synthetic bilingual clinical-style corpus generation and ingestion.

Documents mix local-script pseudo-words, Latin domain terms and
digit/symbol tokens at configurable ratios. A designated slice of the
lexicon is "emergency-flavored"; a document's label is 1 when the count
of its corpus's label-driving terms exceeds a length-scaled threshold
(subject to signal_strength and label_noise).

The teacher corpus is a domain-dense variant sharing the Latin lexicon
but using its own local-word pool, and its labels depend on the full
emergency-flavored slice. Student labels depend only on a core fraction
of that slice (indicative_fraction), so the teacher knows every
emergency-flavored term while the extra terms act as ranking noise when
it is applied to student data zero-shot. The student train split can
additionally correlate a slice of the local-word pool with the observed
label (distractor shortcut); dev and test never do.

Record format: one document per line, three tab-separated fields
(split, label, text), UTF-8.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autograd import ValidationError
from .textprep import Lexicon, Script, classify_words

SPLITS = ("train", "dev", "test")

_CONSONANTS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"
# Distractor slices of the local pool: words correlated with label 1 / 0.
_DISTRACTOR_SHARE = 0.2


class ParseError(ValueError):
    """Malformed corpus file content; message carries the line number."""


@dataclass(frozen=True)
class GeneratorConfig:
    n_train: int = 2000
    n_dev: int = 1000
    n_test: int = 2000
    ratio_local: float = 0.43
    ratio_domain: float = 0.23
    ratio_other: float = 0.34
    lexicon_size: int = 150
    lexicon_hit_rate: float = 0.20
    emergency_fraction: float = 0.30
    emergency_draw_rate: float = 0.95
    indicative_fraction: float = 0.50
    signal_strength: float = 0.90
    label_noise: float = 0.02
    len_min: int = 10
    len_max: int = 28
    threshold_rate: float = 0.02
    distractor_strength: float = 0.30
    local_pool_size: int = 240
    filler_pool_size: int = 240
    seed: int = 7

    def __post_init__(self):
        for name in ("n_train", "n_dev", "n_test", "lexicon_size",
                     "local_pool_size", "filler_pool_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        ratios = (self.ratio_local, self.ratio_domain, self.ratio_other)
        if any(r < 0 for r in ratios):
            raise ValidationError(f"ratios must be nonnegative, got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ValidationError(
                f"ratio_local/ratio_domain/ratio_other must sum to 1, got {sum(ratios)!r}")
        for name in ("lexicon_hit_rate", "emergency_fraction", "emergency_draw_rate",
                     "indicative_fraction", "signal_strength", "label_noise",
                     "threshold_rate", "distractor_strength"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        if not 1 <= self.len_min <= self.len_max:
            raise ValidationError(
                f"need 1 <= len_min <= len_max, got {self.len_min}..{self.len_max}")


# Teacher corpora are domain-dense and cleanly labeled; the emergency
# subset is drawn sparsely so presence stays informative.
TEACHER_PROFILE = dict(
    ratio_local=0.15,
    ratio_domain=0.60,
    ratio_other=0.25,
    lexicon_hit_rate=0.35,
    emergency_draw_rate=0.13,
    indicative_fraction=1.0,
    signal_strength=1.0,
    label_noise=0.0,
    distractor_strength=0.0,
)


def teacher_variant(config: GeneratorConfig, **overrides) -> GeneratorConfig:
    """Domain-rich counterpart of a student corpus config: same lexicon
    knobs, denser Latin terms, clean labels, its own local pool."""
    fields = dict(TEACHER_PROFILE)
    fields["n_train"] = 2 * config.n_train
    fields["n_dev"] = config.n_dev
    fields["n_test"] = config.n_test
    fields["seed"] = config.seed + 1
    fields.update(overrides)
    return dataclasses.replace(config, **fields)


@dataclass(frozen=True)
class Document:
    text: str
    label: int
    split: str


@dataclass
class Corpus:
    documents: list[Document]

    def split(self, name: str) -> list[Document]:
        return [d for d in self.documents if d.split == name]

    def __len__(self) -> int:
        return len(self.documents)


@dataclass
class SyntheticCorpus(Corpus):
    lexicon_terms: list[str] = field(default_factory=list)
    emergency_terms: list[str] = field(default_factory=list)

    @property
    def lexicon(self) -> Lexicon:
        return Lexicon(self.lexicon_terms)


@dataclass
class WordPools:
    lexicon: list[str]
    emergency: list[str]  # emergency-flavored slice, drawn by emergency_draw_rate
    label_terms: list[str]  # subset whose counts drive this corpus's labels
    filler: list[str]
    local: list[str]
    other: list[str]

    @property
    def distractor_pos(self) -> list[str]:
        n = max(1, int(len(self.local) * _DISTRACTOR_SHARE))
        return self.local[:n]

    @property
    def distractor_neg(self) -> list[str]:
        n = max(1, int(len(self.local) * _DISTRACTOR_SHARE))
        return self.local[n: 2 * n]


def _latin_words(rng: np.random.Generator, count: int,
                 taken: set[str]) -> list[str]:
    words: list[str] = []
    while len(words) < count:
        syllables = int(rng.integers(2, 5))
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS))
                    for _ in range(syllables))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _local_words(rng: np.random.Generator, count: int) -> list[str]:
    # words composed from a small syllable inventory so subword merges
    # have structure to find
    inventory = [chr(0xAC00 + int(c)) for c in rng.integers(0, 11172, size=96)]
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        w = "".join(rng.choice(inventory, size=int(rng.integers(1, 4))))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _other_words(rng: np.random.Generator) -> list[str]:
    digits = [str(int(v)) for v in rng.integers(0, 200, size=40)]
    return digits + [".", "/", ":", "%", "-", "+", "(", ")"]


def build_pools(config: GeneratorConfig,
                rng: Optional[np.random.Generator] = None) -> WordPools:
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x9001]))
    taken: set[str] = set()
    lexicon = _latin_words(rng, config.lexicon_size, taken)
    n_emergency = max(1, round(config.emergency_fraction * config.lexicon_size))
    emergency = lexicon[:n_emergency]
    n_core = max(1, round(config.indicative_fraction * n_emergency))
    filler = _latin_words(rng, config.filler_pool_size, taken)
    local = _local_words(rng, config.local_pool_size)
    return WordPools(lexicon=lexicon, emergency=emergency,
                     label_terms=emergency[:n_core], filler=filler,
                     local=local, other=_other_words(rng))


def rule_label(text: str, emergency_terms: Sequence[str],
               threshold_rate: float) -> int:
    """The generating rule: 1 iff the emergency-term count exceeds
    floor(threshold_rate * word count)."""
    words = text.split()
    emergency = set(emergency_terms)
    hits = sum(1 for w in words if w in emergency)
    return int(hits > int(threshold_rate * len(words)))


def _make_document(rng: np.random.Generator, config: GeneratorConfig,
                   pools: WordPools, split: str) -> Document:
    n_words = int(rng.integers(config.len_min, config.len_max + 1))
    # randomized largest-remainder apportionment keeps split-level class
    # ratios tight without biasing per-document composition
    ratios = np.array([config.ratio_local, config.ratio_domain, config.ratio_other])
    counts = np.floor(ratios * n_words).astype(np.int64)
    leftover = n_words - int(counts.sum())
    if leftover:
        frac = ratios * n_words - counts
        extra = rng.choice(3, size=leftover, p=frac / frac.sum())
        np.add.at(counts, extra, 1)
    classes = rng.permutation(np.repeat(np.arange(3), counts))
    words: list[Optional[str]] = [None] * n_words
    label_terms = set(pools.label_terms)
    label_count = 0
    for i, cls in enumerate(classes):
        if cls == 1:  # Latin domain slot
            if rng.random() < config.lexicon_hit_rate:
                if rng.random() < config.emergency_draw_rate:
                    term = pools.emergency[int(rng.integers(len(pools.emergency)))]
                    words[i] = term
                    label_count += term in label_terms
                else:
                    neutral_offset = len(pools.emergency)
                    idx = int(rng.integers(neutral_offset, len(pools.lexicon)))
                    words[i] = pools.lexicon[idx]
            else:
                words[i] = pools.filler[int(rng.integers(len(pools.filler)))]
        elif cls == 2:
            words[i] = pools.other[int(rng.integers(len(pools.other)))]

    threshold = int(config.threshold_rate * n_words)
    label = int(label_count > threshold)
    if rng.random() >= config.signal_strength:
        label = int(rng.integers(2))
    if rng.random() < config.label_noise:
        label = 1 - label

    # local slots last: train-split distractors depend on the final label
    use_distractors = split == "train" and config.distractor_strength > 0
    for i, cls in enumerate(classes):
        if cls != 0:
            continue
        if use_distractors and rng.random() < config.distractor_strength:
            pool = pools.distractor_pos if label == 1 else pools.distractor_neg
        else:
            pool = pools.local
        words[i] = pool[int(rng.integers(len(pool)))]
    return Document(text=" ".join(w for w in words if w), label=label, split=split)


def generate(config: GeneratorConfig,
             pools: Optional[WordPools] = None) -> SyntheticCorpus:
    """Deterministically generate train/dev/test splits. Supplying pools
    lets several corpora (student, teacher) share their Latin vocabulary."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x9002]))
    if pools is None:
        pools = build_pools(config)
    docs: list[Document] = []
    for split, count in zip(SPLITS, (config.n_train, config.n_dev, config.n_test)):
        for _ in range(count):
            docs.append(_make_document(rng, config, pools, split))
    return SyntheticCorpus(documents=docs, lexicon_terms=list(pools.lexicon),
                           emergency_terms=list(pools.label_terms))


def generate_suite(config: GeneratorConfig,
                   teacher_overrides: Optional[dict] = None
                   ) -> tuple[SyntheticCorpus, SyntheticCorpus]:
    """Student corpus plus its domain-rich teacher counterpart. Latin pools
    (lexicon, emergency subset, fillers) are shared; local pools are not."""
    t_config = teacher_variant(config, **(teacher_overrides or {}))
    pools = build_pools(config)
    t_rng = np.random.default_rng(np.random.SeedSequence([t_config.seed, 0x9003]))
    t_pools = WordPools(lexicon=pools.lexicon, emergency=pools.emergency,
                        label_terms=pools.emergency, filler=pools.filler,
                        local=_local_words(t_rng, t_config.local_pool_size),
                        other=pools.other)
    return generate(config, pools), generate(t_config, t_pools)


@dataclass(frozen=True)
class SplitCounts:
    total: int = 0
    local: int = 0
    local_hits: int = 0
    latin: int = 0
    latin_hits: int = 0
    other: int = 0

    def add(self, script: Script, is_term: bool) -> "SplitCounts":
        return SplitCounts(
            total=self.total + 1,
            local=self.local + (script is Script.LOCAL),
            local_hits=self.local_hits + (script is Script.LOCAL and is_term),
            latin=self.latin + (script is Script.DOMAIN_LATIN),
            latin_hits=self.latin_hits + (script is Script.DOMAIN_LATIN and is_term),
            other=self.other + (script is Script.OTHER))


@dataclass
class CorpusStats:
    per_split: dict[str, SplitCounts]

    @property
    def total(self) -> SplitCounts:
        agg = SplitCounts()
        for counts in self.per_split.values():
            agg = SplitCounts(*(a + b for a, b in
                                zip(dataclasses.astuple(agg), dataclasses.astuple(counts))))
        return agg

    def ratios(self) -> tuple[float, float, float]:
        t = self.total
        if t.total == 0:
            return (0.0, 0.0, 0.0)
        return (t.local / t.total, t.latin / t.total, t.other / t.total)

    def latin_hit_rate(self) -> float:
        t = self.total
        return t.latin_hits / t.latin if t.latin else 0.0

    def format_table(self) -> str:
        rows = [["split", "total", "local(hits)", "latin(hits)", "other"]]
        items = list(self.per_split.items()) + [("total", self.total)]
        for name, c in items:
            rows.append([name, str(c.total), f"{c.local}({c.local_hits})",
                         f"{c.latin}({c.latin_hits})", str(c.other)])
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
                         for r in rows)

    def kv_lines(self) -> list[str]:
        lines = []
        for name, c in list(self.per_split.items()) + [("total", self.total)]:
            for fld in dataclasses.fields(SplitCounts):
                lines.append(f"{name}_{fld.name} {getattr(c, fld.name)}")
        local, latin, other = self.ratios()
        lines += [f"ratio_local {local!r}", f"ratio_latin {latin!r}",
                  f"ratio_other {other!r}", f"latin_hit_rate {self.latin_hit_rate()!r}"]
        return lines


def corpus_stats(corpus: Corpus, lexicon: Optional[Lexicon] = None) -> CorpusStats:
    """Word counts by script class and lexicon membership, per split."""
    if lexicon is None:
        if isinstance(corpus, SyntheticCorpus):
            lexicon = corpus.lexicon
        else:
            lexicon = Lexicon([])
    per_split: dict[str, SplitCounts] = {s: SplitCounts() for s in SPLITS}
    for doc in corpus.documents:
        counts = per_split.setdefault(doc.split, SplitCounts())
        for ann in classify_words(doc.text, lexicon):
            counts = counts.add(ann.script, ann.is_lexicon_term)
        per_split[doc.split] = counts
    return CorpusStats(per_split)


def save_corpus(corpus: Corpus, path: str | Path,
                splits: Optional[Sequence[str]] = None) -> None:
    """Write documents (optionally restricted to some splits) as
    split<TAB>label<TAB>text lines."""
    lines = [f"{d.split}\t{d.label}\t{d.text}"
             for d in corpus.documents if splits is None or d.split in splits]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_corpus(path: str | Path) -> Corpus:
    """Parse and validate a corpus file; malformed lines raise ParseError
    naming the line number."""
    docs: list[Document] = []
    for lineno, raw in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, "
                             f"got {len(parts)}")
        split, label_text, text = parts
        if split not in SPLITS:
            raise ParseError(f"{path}:{lineno}: unknown split {split!r}")
        if label_text not in ("0", "1"):
            raise ParseError(f"{path}:{lineno}: label must be 0 or 1, got {label_text!r}")
        if not text.strip():
            raise ParseError(f"{path}:{lineno}: empty document text")
        docs.append(Document(text=text, label=int(label_text), split=split))
    return Corpus(documents=docs)
