"""Training orchestration: teacher pretraining, baseline fine-tuning, and
distillation training, with deterministic seeding and early stopping.

One run is single-threaded over the gradient tape. The optimizer is Adam
with decoupled weight decay and two learning-rate groups (encoder body /
classifier head). Every epoch logs the loss breakdown and dev metrics;
the best dev checkpoint (by the early-stop metric) is restored at the
end and evaluated on the test split.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autograd import Tensor, ValidationError
from .bpe import BpeVocab, encode
from .corpus import Corpus, Document
from .distill import (LossWeights, TeacherTargets, pool_teacher_targets,
                      selection_matrices, total_loss)
from .encoder import Encoder, EncoderConfig, freeze
from .metrics import MetricReport, binary_metrics
from .textprep import Lexicon, MaskPolicy, build_mask, classify_words, preprocess


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 15
    lr_body: float = 1e-3
    lr_classifier: float = 1e-2
    weight_decay: float = 0.01
    seed: int = 42
    alpha: float = 0.6
    beta: float = 0.2
    enable_hidn: bool = True
    enable_attn: bool = True
    mask_policy: MaskPolicy = MaskPolicy.ALL_DOMAIN_SCRIPT
    early_stop_metric: str = "auroc"
    patience: int = 4

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValidationError("batch_size, epochs and patience must be positive")
        if self.lr_body <= 0 or self.lr_classifier <= 0:
            raise ValidationError("learning rates must be positive")
        if self.early_stop_metric not in ("auroc", "auprc", "accuracy", "f1"):
            raise ValidationError(f"unknown early_stop_metric {self.early_stop_metric!r}")
        LossWeights(self.alpha, self.beta)  # weight range check

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)


class AdamW:
    """Adam with decoupled weight decay; parameter groups carry their own
    learning rate. State arrays are index-aligned with the group lists."""

    def __init__(self, groups: Sequence[tuple[Sequence[Tensor], float]],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.groups = [(list(params), lr) for params, lr in groups]
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [[np.zeros_like(p.data) for p in params] for params, _ in self.groups]
        self._v = [[np.zeros_like(p.data) for p in params] for params, _ in self.groups]

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for gi, (params, lr) in enumerate(self.groups):
            for pi, p in enumerate(params):
                if p.grad is None:
                    continue
                m = self._m[gi][pi]
                v = self._v[gi][pi]
                m *= b1
                m += (1 - b1) * p.grad
                v *= b2
                v += (1 - b2) * p.grad ** 2
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if self.weight_decay:
                    update = update + self.weight_decay * p.data
                p.data -= lr * update


@dataclass
class EncodedExample:
    ids: np.ndarray
    mask: np.ndarray
    label: int
    n_tokens: int
    text: str


@dataclass
class TaskData:
    """Tokenized splits plus the artifacts they were built from."""

    train: list[EncodedExample]
    dev: list[EncodedExample]
    test: list[EncodedExample]
    lexicon: Lexicon
    vocab_size: int
    max_len: int
    mask_policy: MaskPolicy


def encode_documents(documents: Sequence[Document], vocab: BpeVocab,
                     lexicon: Lexicon, max_len: int,
                     policy: MaskPolicy) -> list[EncodedExample]:
    examples = []
    for doc in documents:
        text = preprocess(doc.text)
        tok = encode(vocab, text, max_len)
        mask = build_mask(tok, classify_words(text, lexicon), policy)
        examples.append(EncodedExample(ids=tok.ids, mask=mask.values,
                                       label=doc.label, n_tokens=tok.n_tokens,
                                       text=text))
    return examples


def prepare_task_data(corpus: Corpus, vocab: BpeVocab, lexicon: Lexicon,
                      max_len: int,
                      policy: MaskPolicy = MaskPolicy.ALL_DOMAIN_SCRIPT) -> TaskData:
    splits = {name: encode_documents(corpus.split(name), vocab, lexicon,
                                     max_len, policy)
              for name in ("train", "dev", "test")}
    return TaskData(train=splits["train"], dev=splits["dev"], test=splits["test"],
                    lexicon=lexicon, vocab_size=len(vocab), max_len=max_len,
                    mask_policy=policy)


@dataclass
class Batch:
    indices: np.ndarray
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    @property
    def width(self) -> int:
        return int(self.ids.shape[1])


def _stack_batch(examples: Sequence[EncodedExample],
                 indices: np.ndarray) -> Batch:
    """Stack and trim the shared pad tail; content columns are untouched."""
    width = max(e.n_tokens for e in examples)
    return Batch(indices=indices,
                 ids=np.stack([e.ids[:width] for e in examples]),
                 mask=np.stack([e.mask[:width] for e in examples]),
                 labels=np.array([e.label for e in examples], dtype=np.int64))


def iter_batches(examples: Sequence[EncodedExample], batch_size: int,
                 rng: Optional[np.random.Generator] = None):
    order = np.arange(len(examples))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        idx = order[start: start + batch_size]
        yield _stack_batch([examples[i] for i in idx], idx)


def evaluate(model: Encoder, examples: Sequence[EncodedExample],
             batch_size: int = 64) -> MetricReport:
    scores, labels = predict_scores(model, examples, batch_size)
    return binary_metrics(scores, labels)


def predict_scores(model: Encoder, examples: Sequence[EncodedExample],
                   batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    scores = []
    labels = []
    for batch in iter_batches(examples, batch_size):
        out = model.forward(batch.ids, capture=False)
        scores.append(out.scores)
        labels.append(batch.labels)
    return np.concatenate(scores), np.concatenate(labels)


class TeacherCache:
    """Lazily computed, per-example pooled teacher targets.

    Pooled values depend only on an example's content (trimmed pad columns
    carry zero attention and are never pooled), so rows computed at one
    batch width are exact for any other batch containing the example.
    """

    def __init__(self, teacher: Encoder):
        self.teacher = teacher
        self.full_len = teacher.config.max_len
        self._rows: dict[int, tuple[list[np.ndarray], list[np.ndarray], int]] = {}

    def _fill(self, batch: Batch) -> None:
        out = self.teacher.forward(batch.ids, capture=True)
        pooled = pool_teacher_targets(out, batch.mask)
        for row, example_index in enumerate(batch.indices):
            k = int(batch.mask[row].max())
            hidden = [h[row, :k] for h in pooled.hidden]
            attn = [a[row, :k] for a in pooled.attn]
            self._rows[int(example_index)] = (hidden, attn, k)

    def targets(self, batch: Batch) -> TeacherTargets:
        if any(int(i) not in self._rows for i in batch.indices):
            self._fill(batch)
        rows = [self._rows[int(i)] for i in batch.indices]
        b = len(rows)
        k_max = max((r[2] for r in rows), default=0)
        n_hidden = len(rows[0][0])
        d = rows[0][0][0].shape[-1]
        hidden = [np.zeros((b, k_max, d)) for _ in range(n_hidden)]
        attn = [np.zeros((b, k_max, self.full_len)) for _ in range(n_hidden - 1)]
        valid = np.zeros((b, k_max))
        for e, (h_rows, a_rows, k) in enumerate(rows):
            valid[e, :k] = 1.0
            for p in range(n_hidden):
                hidden[p][e, :k] = h_rows[p]
            for p in range(n_hidden - 1):
                attn[p][e, :k] = a_rows[p]
        return TeacherTargets(hidden=hidden, attn=attn, valid=valid,
                              full_len=self.full_len)


@dataclass
class EpochRow:
    epoch: int
    train_total: float
    train_pred: float
    train_hidn: float
    train_attn: float
    decomp_err: float
    dev: MetricReport


@dataclass
class RunRecord:
    config: dict
    epochs: list[EpochRow] = field(default_factory=list)
    best_epoch: int = -1
    test: Optional[MetricReport] = None

    def kv_lines(self) -> list[str]:
        lines = [f"config.{k} {v}" for k, v in sorted(self.config.items())]
        lines.append(f"best_epoch {self.best_epoch}")
        if self.test is not None:
            lines += [f"test.{l}" for l in self.test.kv_lines()]
        return lines

    def epoch_table(self) -> str:
        header = ("epoch", "train_total", "train_pred", "train_hidn", "train_attn",
                  "dev_auroc", "dev_auprc", "dev_f1", "dev_accuracy")
        rows = [header]
        for e in self.epochs:
            d = e.dev.as_dict()

            def cell(v):
                return "undefined" if v is None else f"{v:.6f}"

            rows.append((str(e.epoch), f"{e.train_total:.6f}", f"{e.train_pred:.6f}",
                         f"{e.train_hidn:.6f}", f"{e.train_attn:.6f}",
                         cell(d["auroc"]), cell(d["auprc"]), cell(d["f1"]),
                         cell(d["accuracy"])))
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
                         for r in rows)

    def save(self, path: str | Path) -> None:
        body = "\n".join(self.kv_lines()) + "\n\n" + self.epoch_table() + "\n"
        Path(path).write_text(body, encoding="utf-8")


@dataclass
class TrainResult:
    model: Encoder
    record: RunRecord


def _metric_value(report: MetricReport, name: str) -> float:
    value = report.as_dict()[name]
    return -np.inf if value is None else value


def _config_snapshot(config: TrainConfig, encoder_config: EncoderConfig,
                     teacher_present: bool) -> dict:
    snap = {f"train.{k}": (v.value if isinstance(v, MaskPolicy) else v)
            for k, v in dataclasses.asdict(config).items()}
    snap.update({f"encoder.{k}": v
                 for k, v in dataclasses.asdict(encoder_config).items()})
    snap["teacher_present"] = teacher_present
    return snap


def train_student(data: TaskData, teacher: Optional[Encoder],
                  config: TrainConfig,
                  encoder_config: EncoderConfig) -> TrainResult:
    """Fine-tune a student; with a teacher, add the distillation objective
    (knowledge transfer and classification run simultaneously)."""
    if not data.train or not data.dev:
        raise ValidationError("train and dev splits must be non-empty")
    if encoder_config.vocab_size != data.vocab_size:
        raise ValidationError(
            f"encoder vocab {encoder_config.vocab_size} != tokenizer vocab {data.vocab_size}")
    if teacher is not None:
        for fld in ("d_model", "max_len", "vocab_size", "p_layers", "n_heads"):
            tv = getattr(teacher.config, fld)
            sv = getattr(encoder_config, fld)
            if tv != sv:
                raise ValidationError(
                    f"teacher/student config mismatch on {fld}: {tv} != {sv}")
        if not teacher.frozen:
            teacher = freeze(teacher)

    model = Encoder(encoder_config, seed=config.seed)
    optimizer = AdamW(
        groups=[(model.body_parameters(), config.lr_body),
                (model.classifier_parameters(), config.lr_classifier)],
        weight_decay=config.weight_decay)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x50FF1E]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD0]))

    distilling = teacher is not None and (config.enable_hidn or config.enable_attn)
    cache = TeacherCache(teacher) if distilling else None
    record = RunRecord(config=_config_snapshot(config, encoder_config,
                                               teacher is not None))
    best_metric = -np.inf
    best_model = None
    best_epoch = -1

    for epoch in range(1, config.epochs + 1):
        sums = {"total": 0.0, "pred": 0.0, "hidn": 0.0, "attn": 0.0}
        decomp_err = 0.0
        n_batches = 0
        for batch in iter_batches(data.train, config.batch_size, shuffle_rng):
            s_out = model.forward(batch.ids, capture=distilling, training=True,
                                  rng=dropout_rng)
            targets = cache.targets(batch) if distilling else None
            loss, parts = total_loss(
                s_out, targets, batch.labels, batch.mask, config.weights,
                enable_hidn=config.enable_hidn, enable_attn=config.enable_attn)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for key in sums:
                sums[key] += parts[key]
            decomp_err = max(decomp_err, abs(
                parts["total"] - (parts["pred"] + parts["hidn"] + parts["attn"])))
            n_batches += 1

        dev_report = evaluate(model, data.dev)
        record.epochs.append(EpochRow(
            epoch=epoch,
            train_total=sums["total"] / n_batches,
            train_pred=sums["pred"] / n_batches,
            train_hidn=sums["hidn"] / n_batches,
            train_attn=sums["attn"] / n_batches,
            decomp_err=decomp_err,
            dev=dev_report))
        value = _metric_value(dev_report, config.early_stop_metric)
        if value > best_metric:
            best_metric = value
            best_model = model.copy()
            best_epoch = epoch
        elif epoch - best_epoch >= config.patience:
            break

    assert best_model is not None
    record.best_epoch = best_epoch
    record.test = evaluate(best_model, data.test) if data.test else None
    return TrainResult(model=best_model, record=record)


def pretrain_teacher(data: TaskData, config: TrainConfig,
                     encoder_config: EncoderConfig) -> TrainResult:
    """Train on the domain-rich corpus until the validation metric
    plateaus, then freeze."""
    if not data.train:
        raise ValidationError("teacher corpus has an empty train split")
    result = train_student(data, None, config, encoder_config)
    freeze(result.model)
    return result


def repeat_over_seeds(data: TaskData, teacher: Optional[Encoder],
                      config: TrainConfig, encoder_config: EncoderConfig,
                      seeds: Sequence[int] = (42, 43, 44)) -> list[TrainResult]:
    return [train_student(data, teacher, dataclasses.replace(config, seed=s),
                          encoder_config)
            for s in seeds]


@dataclass
class AblationCell:
    label: str
    overrides: dict
    results: list[TrainResult]

    def metric_stats(self, name: str) -> tuple[float, float]:
        vals = [_metric_value(r.record.test, name) for r in self.results]
        return float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def ablation_grid(data: TaskData, teacher: Optional[Encoder],
                  base_config: TrainConfig, encoder_config: EncoderConfig,
                  grid: Sequence[dict]) -> list[AblationCell]:
    """One full student run per override set (times the requested seeds);
    each cell reports test AUROC/AUPRC/F1."""
    if not grid:
        raise ValidationError("ablation grid is empty")
    cells = []
    for cell_overrides in grid:
        overrides = dict(cell_overrides)
        label = overrides.pop("label", None) or f"cell{len(cells)}"
        seeds = overrides.pop("seeds", [base_config.seed])
        config = dataclasses.replace(base_config, **overrides)
        results = [train_student(data, teacher,
                                 dataclasses.replace(config, seed=s), encoder_config)
                   for s in seeds]
        cells.append(AblationCell(label=label, overrides=overrides, results=results))
    return cells


def format_ablation_table(cells: Sequence[AblationCell]) -> str:
    rows = [["cell", "AUROC", "AUPRC", "F1"]]
    for cell in cells:
        row = [cell.label]
        for metric in ("auroc", "auprc", "f1"):
            mean, sd = cell.metric_stats(metric)
            row.append(f"{100 * mean:.1f}+-{100 * sd:.1f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
                     for r in rows)


def collect_embedding_rows(model: Encoder, examples: Sequence[EncodedExample],
                           source_tag: str, max_docs: Optional[int] = None,
                           batch_size: int = 32
                           ) -> list[tuple[np.ndarray, str, str]]:
    """Per document: the [CLS] vector (non_domain) and one pooled vector
    per knowledge word (domain), from the final layer."""
    subset = examples[:max_docs] if max_docs else examples
    rows: list[tuple[np.ndarray, str, str]] = []
    for batch in iter_batches(subset, batch_size):
        out = model.forward(batch.ids, capture=True)
        final = out.hidden[-1].data
        weights, valid = selection_matrices(batch.mask)
        pooled = np.matmul(weights, final)
        for e in range(final.shape[0]):
            rows.append((final[e, 0].copy(), source_tag, "non_domain"))
            for j in range(pooled.shape[1]):
                if valid[e, j]:
                    rows.append((pooled[e, j].copy(), source_tag, "domain"))
    return rows
