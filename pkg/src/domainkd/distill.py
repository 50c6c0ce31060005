"""Masked per-word pooling of hidden states and attention rows, and the
distillation objective built from them.

For knowledge word j, pooling averages the hidden vectors of its subword
positions (one d-vector per word) and, for attention, averages over heads
and over the word's query rows (one length-l row per word, key axis kept).
Losses are means of squared differences over valid pooled entries only;
teacher values are treated as constants. Per-layer losses are summed over
layers: the embedding layer (index 0) contributes only the hidden-state
term since it has no attention matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor, ValidationError
from .encoder import EncoderOutput


class StateError(RuntimeError):
    """An operation needed captured hidden/attention lists but got none."""


@dataclass(frozen=True)
class LossWeights:
    """alpha scales hidden-state distillation, beta attention distillation."""

    alpha: float = 0.6
    beta: float = 0.2

    def __post_init__(self):
        for name, v in (("alpha", self.alpha), ("beta", self.beta)):
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class PooledKnowledge:
    """Knowledge-axis-padded pooled tensors plus their validity mask.

    Row j of an example is valid iff the example has > j knowledge words;
    invalid rows are exactly zero and excluded from loss means.
    """

    hidden_pooled: Tensor  # (b, k_max, d)
    attn_pooled: Optional[Tensor]  # (b, k_max, l); None for the embedding layer
    valid: np.ndarray  # (b, k_max) in {0, 1}


def selection_matrices(mask_batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-example averaging matrices W (b, k_max, l) with W[e, j, t] =
    1/|word j| where mask[e, t] == j+1, plus the validity mask (b, k_max)."""
    mask = np.asarray(mask_batch, dtype=np.int64)
    if mask.ndim != 2:
        raise ValidationError(f"mask batch must be 2-d, got shape {mask.shape}")
    b, l = mask.shape
    k_max = int(mask.max()) if mask.size else 0
    weights = np.zeros((b, k_max, l))
    valid = np.zeros((b, k_max))
    for j in range(1, k_max + 1):
        sel = mask == j
        counts = sel.sum(axis=1)
        present = counts > 0
        valid[present, j - 1] = 1.0
        weights[:, j - 1, :] = sel / np.maximum(counts, 1)[:, None]
    return weights, valid


def pool_hidden(hidden: Tensor, mask_batch: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Average hidden vectors within each knowledge word: (b, l, d) ->
    (b, k_max, d) plus validity (b, k_max)."""
    if hidden.ndim != 3:
        raise ValidationError(f"hidden must be (b, l, d), got {hidden.shape}")
    weights, valid = selection_matrices(mask_batch)
    if weights.shape[-1] != hidden.shape[1]:
        raise ValidationError(
            f"mask length {weights.shape[-1]} != sequence length {hidden.shape[1]}")
    return ag.matmul(Tensor(weights), hidden), valid


def pool_attention(attn: Tensor, mask_batch: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Average attention rows over heads and over each knowledge word's
    query positions: (b, h, l, l) -> (b, k_max, l) plus validity."""
    if attn.ndim != 4:
        raise ValidationError(f"attention must be (b, h, l, l), got {attn.shape}")
    weights, valid = selection_matrices(mask_batch)
    if weights.shape[-1] != attn.shape[2]:
        raise ValidationError(
            f"mask length {weights.shape[-1]} != sequence length {attn.shape[2]}")
    head_mean = ag.mean_axis(attn, axis=1)  # (b, l, l)
    return ag.matmul(Tensor(weights), head_mean), valid


@dataclass
class TeacherTargets:
    """Detached pooled teacher values, ready to distill against.

    hidden[p]: (b, k_max, d) for layers 0..P; attn[p-1]: (b, k_max, l_full)
    for layers 1..P with the key axis padded to the model's max_len (pad
    keys carry exactly zero attention, so padding is value-preserving).
    """

    hidden: list[np.ndarray]
    attn: list[np.ndarray]
    valid: np.ndarray
    full_len: int


def pool_teacher_targets(teacher_out: EncoderOutput,
                         mask_batch: np.ndarray) -> TeacherTargets:
    """Pool a captured teacher forward into constant distillation targets."""
    if not teacher_out.hidden:
        raise StateError("teacher forward must be run with capture=True")
    weights, valid = selection_matrices(np.asarray(mask_batch))
    width = teacher_out.hidden[0].shape[1]
    full = teacher_out.full_len
    hidden = [np.matmul(weights, h.data) for h in teacher_out.hidden]
    attn = []
    for a in teacher_out.attn:
        pooled = np.matmul(weights, a.data.mean(axis=1))
        if width < full:
            pooled = np.pad(pooled, ((0, 0), (0, 0), (0, full - width)))
        attn.append(pooled)
    return TeacherTargets(hidden=hidden, attn=attn, valid=valid, full_len=full)


def _attn_term(student_attn: Tensor, sel: Tensor, target_rows: np.ndarray,
               valid: np.ndarray, beta: float, width: int, full_len: int) -> Tensor:
    """Pooled-attention MSE normalized over the model's full key axis; the
    trimmed pad tail is zero on both sides, so only the denominator needs
    the correction factor."""
    pooled = ag.matmul(sel, ag.mean_axis(student_attn, axis=1))
    term = ag.mse(pooled, Tensor(target_rows[:, :, :width]), valid_mask=valid)
    return ag.scale(term, beta * (width / full_len))


def layer_loss(student_out: EncoderOutput, teacher_out: EncoderOutput,
               mask_batch: np.ndarray, p: int, w: LossWeights) -> Tensor:
    """alpha-weighted pooled-hidden MSE at layer p, plus the beta-weighted
    pooled-attention MSE for p >= 1. Teacher side is detached."""
    if not student_out.hidden or not teacher_out.hidden:
        raise StateError("distillation needs forward passes run with capture=True")
    if not 0 <= p < len(student_out.hidden):
        raise ValidationError(f"layer index {p} outside 0..{len(student_out.hidden) - 1}")
    pooled_s, valid = pool_hidden(student_out.hidden[p], mask_batch)
    pooled_t, _ = pool_hidden(teacher_out.hidden[p].detach(), mask_batch)
    loss = ag.scale(ag.mse(pooled_s, pooled_t.detach(), valid_mask=valid), w.alpha)
    if p > 0:
        width = student_out.attn[p - 1].shape[-1]
        weights, _ = selection_matrices(np.asarray(mask_batch))
        targets = np.matmul(weights, teacher_out.attn[p - 1].data.mean(axis=1))
        loss = ag.add(loss, _attn_term(
            student_out.attn[p - 1], Tensor(weights), targets, valid,
            w.beta, width, student_out.full_len))
    return loss


def total_loss(student_out: EncoderOutput,
               teacher: Optional[EncoderOutput | TeacherTargets],
               labels: np.ndarray,
               mask_batch: Optional[np.ndarray] = None,
               w: LossWeights = LossWeights(),
               enable_hidn: bool = True,
               enable_attn: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Prediction cross-entropy plus the distillation terms summed over all
    layers. Returns the scalar loss and a breakdown with the already
    weighted components, so total == pred + hidn + attn.

    teacher=None is the plain fine-tuning baseline; an EncoderOutput is
    pooled on the fly, while a TeacherTargets reuses precomputed pools."""
    pred = ag.cross_entropy(student_out.logits, labels)
    total = pred
    hidn_sum = 0.0
    attn_sum = 0.0
    if teacher is not None and (enable_hidn or enable_attn):
        if not student_out.hidden:
            raise StateError("distillation needs forward passes run with capture=True")
        if mask_batch is None:
            raise ValidationError("distillation requires the knowledge mask batch")
        if isinstance(teacher, EncoderOutput):
            targets = pool_teacher_targets(teacher, mask_batch)
        else:
            targets = teacher
        weights, valid = selection_matrices(np.asarray(mask_batch))
        sel = Tensor(weights)
        width = student_out.hidden[0].shape[1]
        for p, h_s in enumerate(student_out.hidden):
            if enable_hidn:
                pooled_s = ag.matmul(sel, h_s)
                term = ag.scale(
                    ag.mse(pooled_s, Tensor(targets.hidden[p]), valid_mask=valid),
                    w.alpha)
                hidn_sum += term.item()
                total = ag.add(total, term)
            if enable_attn and p > 0:
                term = _attn_term(student_out.attn[p - 1], sel, targets.attn[p - 1],
                                  valid, w.beta, width, student_out.full_len)
                attn_sum += term.item()
                total = ag.add(total, term)
    breakdown = {"pred": pred.item(), "hidn": hidn_sum, "attn": attn_sum,
                 "total": total.item()}
    return total, breakdown
