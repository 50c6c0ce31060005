"""Shared builders for randomized model/batch/mask test cases."""

import numpy as np

from domainkd.bpe import CLS_ID, PAD_ID, SEP_ID
from domainkd.encoder import Encoder, EncoderConfig

MICRO = dict(p_layers=1, d_model=4, n_heads=2, max_len=6, ffn_mult=2,
             vocab_size=12, dropout=0.0)


def micro_encoder(seed, **overrides):
    cfg = dict(MICRO)
    cfg.update(overrides)
    return Encoder(EncoderConfig(**cfg), seed=seed)


def random_batch(rng, b, l, vocab, max_pad=2):
    """Token ids shaped like real encodings: [CLS] body [SEP] pads."""
    ids = rng.integers(4, vocab, size=(b, l))
    ids[:, 0] = CLS_ID
    for e in range(b):
        pad = int(rng.integers(0, max_pad + 1))
        sep = l - pad - 1
        ids[e, sep] = SEP_ID
        ids[e, sep + 1:] = PAD_ID
    return ids


def random_mask_batch(rng, ids, k_max=3):
    """Knowledge masks consistent with the invariants: contiguous runs
    numbered 1..k over non-special positions, zero elsewhere."""
    b, l = ids.shape
    mask = np.zeros((b, l), dtype=np.int64)
    for e in range(b):
        body = [t for t in range(l)
                if ids[e, t] not in (CLS_ID, SEP_ID, PAD_ID)]
        k = int(rng.integers(0, k_max + 1))
        if not body or k == 0:
            continue
        # carve up to k contiguous runs out of the body positions
        cuts = sorted(rng.choice(len(body) + 1, size=min(k, len(body)), replace=False))
        runs = np.array_split(np.array(body), cuts)
        runs = [r for r in runs if r.size][: k]
        value = 0
        for run in runs:
            take = run[: int(rng.integers(1, run.size + 1))]
            if take.size == 0:
                continue
            value += 1
            mask[e, take] = value
    return mask
