from collections import Counter

import numpy as np
import pytest

from domainkd.autograd import ValidationError
from domainkd.bpe import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    UNK_ID,
    SPECIALS,
    BpeVocab,
    encode,
    load_vocab,
    save_vocab,
    segment_word,
    train_bpe,
)


def pair_frequency_oracle(corpus_lines):
    """Independent recount of symbol-pair frequencies on raw words."""
    counts = Counter()
    for line in corpus_lines:
        for word in line.split():
            syms = [word[0]] + ["##" + c for c in word[1:]]
            for p in zip(syms, syms[1:]):
                counts[p] += 1
    return counts


def test_first_merge_is_most_frequent_pair():
    corpus = ["aa aa aa"]
    vocab = train_bpe(corpus, vocab_size=16)
    oracle = pair_frequency_oracle(corpus)
    assert vocab.merges[0] == max(oracle, key=lambda p: (oracle[p], p))
    assert vocab.merges[0] == ("a", "##a")
    assert "aa" in vocab.token_to_id


def test_zero_merge_budget_gives_character_vocab():
    corpus = ["ab ba"]
    # alphabet: a, b, ##a, ##b
    vocab = train_bpe(corpus, vocab_size=len(SPECIALS) + 4)
    assert vocab.merges == []
    assert set(vocab.token_to_id) == set(SPECIALS) | {"a", "b", "##a", "##b"}


def test_tie_broken_lexicographically():
    # "ab" and "ac" are equally frequent; pair (a,##b) < (a,##c).
    vocab = train_bpe(["ab ac", "ab ac"], vocab_size=len(SPECIALS) + 10)
    assert vocab.merges[0] == ("a", "##b")


def test_vocab_too_small_rejected():
    with pytest.raises(ValidationError):
        train_bpe(["abc"], vocab_size=5)


def test_empty_corpus_rejected():
    with pytest.raises(ValidationError):
        train_bpe(["   ", ""], vocab_size=100)


def test_training_is_deterministic():
    corpus = ["fever cough fever chills", "cough fever malaise"] * 3
    v1 = train_bpe(corpus, vocab_size=40)
    v2 = train_bpe(corpus, vocab_size=40)
    assert v1.merges == v2.merges
    assert v1.token_to_id == v2.token_to_id


def test_specials_occupy_first_four_ids():
    vocab = train_bpe(["xy"], vocab_size=30)
    for i, tok in enumerate(SPECIALS):
        assert vocab.token_to_id[tok] == i
    ids = sorted(vocab.token_to_id.values())
    assert ids == list(range(len(ids)))


def test_encode_empty_text():
    vocab = train_bpe(["ab"], vocab_size=10)
    tok = encode(vocab, "", max_len=6)
    assert tok.ids.tolist() == [CLS_ID, SEP_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]
    assert tok.word_ids.tolist() == [-1] * 6


def test_encode_word_ids_for_multi_subword_word():
    # tiny hand-built vocab: "ab" exists, "cde" does not merge at all
    # (alphabet is a, ##b, c, ##d, ##e; budget leaves exactly one merge)
    vocab = train_bpe(["ab ab ab cde"], vocab_size=len(SPECIALS) + 5 + 1)
    assert vocab.merges == [("a", "##b")]
    tok = encode(vocab, "ab cde", max_len=10)
    # [CLS] ab c ##d ##e [SEP] pads
    assert tok.word_ids.tolist() == [-1, 0, 1, 1, 1, -1, -1, -1, -1, -1]
    assert tok.ids[1] == vocab.token_to_id["ab"]
    assert tok.ids[-1] == PAD_ID


def test_encode_truncation_keeps_sep_last():
    vocab = train_bpe(["abcdefgh"], vocab_size=60)
    tok = encode(vocab, " ".join(["abcdefgh"] * 10), max_len=8)
    assert len(tok) == 8
    assert tok.ids[-1] == SEP_ID
    assert PAD_ID not in tok.ids.tolist()


def test_encode_output_length_always_max_len():
    vocab = train_bpe(["ab cd"], vocab_size=20)
    for text in ["", "ab", "ab cd ab cd ab cd ab cd"]:
        assert len(encode(vocab, text, max_len=9)) == 9


def test_unknown_symbols_become_unk_with_word_id():
    vocab = train_bpe(["ab"], vocab_size=10)
    tok = encode(vocab, "ab zq", max_len=8)
    assert UNK_ID in tok.ids.tolist()
    unk_positions = np.flatnonzero(tok.ids == UNK_ID)
    assert all(tok.word_ids[p] == 1 for p in unk_positions)


def test_word_ids_nondecreasing_and_contiguous():
    corpus = ["alpha beta gamma delta epsilon"] * 2
    vocab = train_bpe(corpus, vocab_size=50)
    tok = encode(vocab, "alpha beta gamma", max_len=32)
    wid = tok.word_ids[tok.word_ids >= 0]
    assert np.all(np.diff(wid) >= 0)
    for w in np.unique(wid):
        pos = np.flatnonzero(tok.word_ids == w)
        assert np.array_equal(pos, np.arange(pos[0], pos[0] + len(pos)))


def test_round_trip_reconstructs_words():
    corpus = ["fever vomiting nausea", "fever chills vomiting"] * 4
    vocab = train_bpe(corpus, vocab_size=64)
    id_to_token = vocab.id_to_token
    text = "vomiting fever nausea chills"
    tok = encode(vocab, text, max_len=40)
    words = text.split()
    for wi, word in enumerate(words):
        toks = [id_to_token[t] for t, w in zip(tok.ids, tok.word_ids) if w == wi]
        rebuilt = "".join(t[2:] if t.startswith("##") else t for t in toks)
        assert rebuilt == word


def test_segment_word_merge_replay_matches_training_segmentation():
    corpus = ["lower lower lowest newer newest"] * 3
    vocab = train_bpe(corpus, vocab_size=70)
    for word in ["lower", "newest", "low"]:
        seq = segment_word(vocab, word)
        rebuilt = "".join(s[2:] if s.startswith("##") else s for s in seq)
        assert rebuilt == word
        assert all(s in vocab.token_to_id for s in seq)


def test_shared_vocab_identical_encodings():
    corpus = ["fever 있음 38 . 5"]
    vocab = train_bpe(corpus, vocab_size=40)
    a = encode(vocab, "fever 있음", max_len=16)
    b = encode(vocab, "fever 있음", max_len=16)
    assert np.array_equal(a.ids, b.ids)
    assert np.array_equal(a.word_ids, b.word_ids)


def test_vocab_file_round_trip(tmp_path):
    corpus = ["septic shock fever", "fever workup shock"] * 2
    vocab = train_bpe(corpus, vocab_size=48)
    path = tmp_path / "vocab.txt"
    save_vocab(vocab, path)
    loaded = load_vocab(path)
    assert loaded.merges == vocab.merges
    assert loaded.token_to_id == vocab.token_to_id
    text = "septic fever workup"
    assert np.array_equal(encode(loaded, text, 20).ids, encode(vocab, text, 20).ids)


def test_vocab_file_rejects_bad_specials(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("#MERGES\n#VOCAB\n[PAD]\t1\n[CLS]\t0\n[SEP]\t2\n[UNK]\t3\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_vocab(path)


def test_greedy_merge_order_matches_recount_oracle():
    rng = np.random.default_rng(5)
    alphabet = list("abcdef")
    words = ["".join(rng.choice(alphabet, size=rng.integers(2, 6))) for _ in range(30)]
    corpus = [" ".join(words)]
    vocab = train_bpe(corpus, vocab_size=len(SPECIALS) + 12 + 5)

    # replay training with a naive full-recount reference
    seqs = {}
    freqs = Counter()
    for w in corpus[0].split():
        freqs[w] += 1
        seqs[w] = [w[0]] + ["##" + c for c in w[1:]]
    expected = []
    for _ in range(5):
        counts = Counter()
        for w, seq in seqs.items():
            for p in zip(seq, seq[1:]):
                counts[p] += freqs[w]
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        expected.append(best)
        merged = best[0] + (best[1][2:] if best[1].startswith("##") else best[1])
        for w, seq in seqs.items():
            out, i = [], 0
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[w] = out
    assert vocab.merges[:5] == expected
