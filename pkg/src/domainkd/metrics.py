"""Classification metric suite, the medical-word-proportion case score,
and the embedding export used for qualitative analysis.

AUROC is the Mann-Whitney rank statistic with midranks for ties. AUPRC is
right-continuous step integration of the precision-recall curve (no
interpolation). With only one class present, both are undefined and
reported as None rather than a number.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autograd import DimensionError, ValidationError
from .textprep import Lexicon, Script, classify_words

EMBEDDING_SOURCES = ("student_alone", "student_kd", "teacher")
KNOWLEDGE_FLAGS = ("domain", "non_domain")


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    auroc: Optional[float]
    auprc: Optional[float]
    recall: float
    precision: float
    f1: float

    @property
    def average(self) -> Optional[float]:
        vals = (self.accuracy, self.auroc, self.auprc, self.recall,
                self.precision, self.f1)
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    def as_dict(self) -> dict[str, Optional[float]]:
        return {"accuracy": self.accuracy, "auroc": self.auroc,
                "auprc": self.auprc, "recall": self.recall,
                "precision": self.precision, "f1": self.f1,
                "average": self.average}

    def kv_lines(self) -> list[str]:
        return [f"{k} {'undefined' if v is None else repr(v)}"
                for k, v in self.as_dict().items()]


METRIC_COLUMNS = ("Accuracy", "AUROC", "AUPRC", "Recall", "Precision",
                  "F1 Score", "Average")


def format_metric_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    """Aligned text table, values scaled x100 to one decimal."""
    def cell(v):
        return "--" if v is None else f"{100 * v:.1f}"

    table = [["Model", *METRIC_COLUMNS]]
    for name, rep in rows:
        d = rep.as_dict()
        table.append([name, cell(d["accuracy"]), cell(d["auroc"]), cell(d["auprc"]),
                      cell(d["recall"]), cell(d["precision"]), cell(d["f1"]),
                      cell(d["average"])])
    widths = [max(len(r[c]) for r in table) for c in range(len(table[0]))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip()
             for row in table]
    return "\n".join(lines)


def _midranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    s = scores[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[order[i: j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Rank statistic: P(score_pos > score_neg) with ties counted half."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Sum of precision * recall-increment over thresholds at each distinct
    score, descending (right-continuous steps)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == len(labels):
        return None
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    area = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        hits = int(y[i: j + 1].sum())
        tp += hits
        fp += (j - i + 1) - hits
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(area)


def binary_metrics(scores: Sequence[float], labels: Sequence[int],
                   threshold: float = 0.5) -> MetricReport:
    """Full report; positive class is label 1. Empty-denominator
    precision/recall fall back to 0."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1 or len(scores) < 1:
        raise DimensionError(
            f"scores/labels must be equal-length 1-d, got {scores.shape} vs {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    accuracy = float(np.mean(pred == (labels == 1)))
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricReport(accuracy=accuracy, auroc=auroc(scores, labels),
                        auprc=auprc(scores, labels), recall=recall,
                        precision=precision, f1=f1)


@dataclass(frozen=True)
class MwpsReport:
    """Aggregated counts: m lexicon terms among Latin words, E Latin words,
    A all words; mwps = m*A/E^2 (None when E is 0)."""

    m: int
    E: int
    A: int

    @property
    def mwps(self) -> Optional[float]:
        if self.E == 0:
            return None
        return self.m * self.A / (self.E * self.E)

    def kv_lines(self) -> list[str]:
        score = "undefined" if self.mwps is None else repr(self.mwps)
        return [f"m {self.m}", f"E {self.E}", f"A {self.A}", f"mwps {score}"]


def count_mwps_words(text: str, lexicon: Lexicon) -> tuple[int, int, int]:
    """(m, E, A) for one preprocessed document."""
    m = E = A = 0
    for ann in classify_words(text, lexicon):
        A += 1
        if ann.script is Script.DOMAIN_LATIN:
            E += 1
            if ann.is_lexicon_term:
                m += 1
    return m, E, A


def mwps(documents: Sequence[str], lexicon: Lexicon,
         per_document: bool = False) -> MwpsReport | list[MwpsReport]:
    """Pooled counts over the documents, then one ratio. per_document=True
    returns one report per document instead."""
    if per_document:
        return [MwpsReport(*count_mwps_words(doc, lexicon)) for doc in documents]
    m = E = A = 0
    for doc in documents:
        dm, de, da = count_mwps_words(doc, lexicon)
        m, E, A = m + dm, E + de, A + da
    return MwpsReport(m, E, A)


def principal_plane(vectors: np.ndarray) -> np.ndarray:
    """Project centered vectors onto their top-2 principal axes, with a
    deterministic sign convention."""
    centered = vectors - vectors.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / max(len(vectors) - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    axes = eigvecs[:, np.argsort(eigvals)[::-1][:2]]
    for c in range(axes.shape[1]):
        peak = np.argmax(np.abs(axes[:, c]))
        if axes[peak, c] < 0:
            axes[:, c] = -axes[:, c]
    return centered @ axes


def export_embeddings(rows: Sequence[tuple[np.ndarray, str, str]],
                      path: str | Path,
                      include_projection: bool = True) -> None:
    """Write one TSV row per vector: components, source tag, knowledge
    flag, and (optionally) the two principal-plane coordinates computed
    over the whole row set."""
    if not rows:
        raise ValidationError("no embedding rows to export")
    vectors = []
    width = None
    for vec, source, flag in rows:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1:
            raise DimensionError(f"embedding rows must be 1-d, got shape {vec.shape}")
        if width is None:
            width = vec.shape[0]
        elif vec.shape[0] != width:
            raise DimensionError(
                f"embedding width mismatch: {vec.shape[0]} vs {width}")
        if source not in EMBEDDING_SOURCES:
            raise ValidationError(f"unknown source tag {source!r}")
        if flag not in KNOWLEDGE_FLAGS:
            raise ValidationError(f"unknown knowledge flag {flag!r}")
        vectors.append(vec)
    matrix = np.stack(vectors)
    projection = None
    if include_projection and width >= 2 and len(rows) >= 2:
        projection = principal_plane(matrix)

    header = [f"dim{i}" for i in range(width)] + ["source", "knowledge"]
    if projection is not None:
        header += ["pc1", "pc2"]
    lines = ["\t".join(header)]
    for i, (vec, source, flag) in enumerate(rows):
        cells = [repr(float(v)) for v in matrix[i]] + [source, flag]
        if projection is not None:
            cells += [repr(float(projection[i, 0])), repr(float(projection[i, 1]))]
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
