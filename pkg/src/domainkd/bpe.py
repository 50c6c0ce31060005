"""Byte-pair-encoding subword tokenizer with per-token source-word tracking.

Words are whitespace-delimited (input text is expected to be preprocessed).
Non-initial subwords carry a "##" continuation marker, so a word can be
reconstructed either from token strings or from the word_ids array.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .autograd import ValidationError

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, UNK)
PAD_ID, CLS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3


@dataclass
class BpeVocab:
    """Merge list in training order plus the dense token-to-id table."""

    merges: list[tuple[str, str]]
    token_to_id: dict[str, int]
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)

    def __post_init__(self):
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def id_to_token(self) -> list[str]:
        table = [""] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            table[i] = tok
        return table


@dataclass
class TokenizedInput:
    """Fixed-length token ids plus the index of each token's source word.

    Special and pad positions carry word_id -1; tokens of one word are
    contiguous and their word_ids non-decreasing.
    """

    ids: np.ndarray
    word_ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.word_ids = np.asarray(self.word_ids, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def n_tokens(self) -> int:
        """Count of non-pad positions (includes [CLS] and [SEP])."""
        return int(np.sum(self.ids != PAD_ID))


def _word_symbols(word: str) -> list[str]:
    return [word[0]] + ["##" + ch for ch in word[1:]]


def _merge_symbol(left: str, right: str) -> str:
    return left + (right[2:] if right.startswith("##") else right)


def _apply_merge(seq: list[str], pair: tuple[str, str], merged: str) -> list[str]:
    out = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def train_bpe(corpus: Iterable[str], vocab_size: int) -> BpeVocab:
    """Learn merges greedily by pair frequency; ties go to the
    lexicographically smaller pair. Deterministic for a given corpus."""
    word_freqs: Counter[str] = Counter()
    for line in corpus:
        word_freqs.update(line.split())
    if not word_freqs:
        raise ValidationError("cannot train a tokenizer on an empty corpus")

    seqs = {w: _word_symbols(w) for w in word_freqs}
    alphabet = sorted({s for seq in seqs.values() for s in seq})
    floor = len(SPECIALS) + len(alphabet)
    if vocab_size < floor:
        raise ValidationError(
            f"vocab_size {vocab_size} below alphabet+specials floor {floor}")

    tokens = list(SPECIALS) + alphabet
    pair_counts: Counter[tuple[str, str]] = Counter()
    pair_words: defaultdict[tuple[str, str], set[str]] = defaultdict(set)
    for w, seq in seqs.items():
        f = word_freqs[w]
        for p in zip(seq, seq[1:]):
            pair_counts[p] += f
            pair_words[p].add(w)

    merges: list[tuple[str, str]] = []
    while len(tokens) < vocab_size and pair_counts:
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merged = _merge_symbol(*best)
        merges.append(best)
        tokens.append(merged)
        for w in pair_words.pop(best, set()):
            seq = seqs[w]
            if best not in set(zip(seq, seq[1:])):  # stale index entry
                continue
            f = word_freqs[w]
            for p in zip(seq, seq[1:]):
                pair_counts[p] -= f
                if pair_counts[p] <= 0:
                    del pair_counts[p]
                pair_words[p].discard(w)
            seq = _apply_merge(seq, best, merged)
            seqs[w] = seq
            for p in zip(seq, seq[1:]):
                pair_counts[p] += f
                pair_words[p].add(w)
        pair_counts.pop(best, None)

    return BpeVocab(merges, {t: i for i, t in enumerate(tokens)})


def segment_word(vocab: BpeVocab, word: str) -> list[str]:
    """Split one word into subword symbols by replaying merges in rank order."""
    seq = _word_symbols(word)
    while len(seq) > 1:
        ranked = [(vocab._ranks[p], p) for p in zip(seq, seq[1:]) if p in vocab._ranks]
        if not ranked:
            break
        _, pair = min(ranked)
        seq = _apply_merge(seq, pair, _merge_symbol(*pair))
    return seq


def encode(vocab: BpeVocab, text: str, max_len: int) -> TokenizedInput:
    """Tokenize preprocessed text to exactly max_len ids.

    [CLS] first, [SEP] as the final non-pad token; hard right-truncation
    keeps [SEP]. Unknown symbols become [UNK] but keep their word_id.
    """
    if max_len < 2:
        raise ValidationError(f"max_len must be >= 2, got {max_len}")
    ids = [CLS_ID]
    word_ids = [-1]
    for wi, word in enumerate(text.split()):
        for sym in segment_word(vocab, word):
            ids.append(vocab.token_to_id.get(sym, UNK_ID))
            word_ids.append(wi)
    ids = ids[: max_len - 1]
    word_ids = word_ids[: max_len - 1]
    ids.append(SEP_ID)
    word_ids.append(-1)
    pad_n = max_len - len(ids)
    ids.extend([PAD_ID] * pad_n)
    word_ids.extend([-1] * pad_n)
    return TokenizedInput(np.array(ids), np.array(word_ids))


def save_vocab(vocab: BpeVocab, path: str | Path) -> None:
    """Two-section text format: "#MERGES" (pair per line, space-separated)
    then "#VOCAB" (token<TAB>id per line)."""
    lines = ["#MERGES"]
    lines += [f"{a} {b}" for a, b in vocab.merges]
    lines.append("#VOCAB")
    lines += [f"{tok}\t{i}" for tok, i in sorted(vocab.token_to_id.items(), key=lambda kv: kv[1])]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> BpeVocab:
    merges: list[tuple[str, str]] = []
    token_to_id: dict[str, int] = {}
    section = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.rstrip("\n")
        if not line:
            continue
        if line == "#MERGES":
            section = "merges"
            continue
        if line == "#VOCAB":
            section = "vocab"
            continue
        if section == "merges":
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValidationError(f"{path}:{lineno}: malformed merge line {line!r}")
            merges.append((parts[0], parts[1]))
        elif section == "vocab":
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{path}:{lineno}: malformed vocab line {line!r}")
            token_to_id[parts[0]] = int(parts[1])
        else:
            raise ValidationError(f"{path}:{lineno}: content before a section header")
    ids = sorted(token_to_id.values())
    if ids != list(range(len(ids))):
        raise ValidationError(f"{path}: token ids are not dense and 0-based")
    for i, tok in enumerate(SPECIALS):
        if token_to_id.get(tok) != i:
            raise ValidationError(f"{path}: special {tok} must have id {i}")
    return BpeVocab(merges, token_to_id)
