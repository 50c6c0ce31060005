"""Command-line workflow: data generation, tokenizer training, teacher
pretraining, baseline/distillation training, evaluation, ablations, and
embedding export.

Configuration comes from flat key = value files; command-line flags win
over file values, which win over defaults. Every subcommand materializes
its resolved configuration and input digests into a manifest before doing
work, refuses to overwrite existing outputs unless --force is given,
sends diagnostics to stderr, and reserves stdout/files for data.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .autograd import DimensionError, ValidationError
from .bpe import load_vocab, save_vocab, train_bpe
from .corpus import (Corpus, GeneratorConfig, ParseError, corpus_stats,
                     generate_suite, load_corpus, save_corpus, teacher_variant)
from .distill import StateError
from .encoder import Encoder, EncoderConfig, load_checkpoint, save_checkpoint
from .metrics import export_embeddings, format_metric_table, mwps
from .textprep import Lexicon, MaskPolicy
from .trainer import (TrainConfig, ablation_grid, collect_embedding_rows,
                      evaluate, format_ablation_table, predict_scores,
                      prepare_task_data, pretrain_teacher, train_student)

STUDENT_FILES = ("train.tsv", "dev.tsv", "test.tsv")
TEACHER_FILES = ("teacher_train.tsv", "teacher_dev.tsv", "teacher_test.tsv")
LEXICON_FILE = "lexicon.txt"
EMERGENCY_FILE = "emergency_terms.txt"


class CliError(Exception):
    """User-facing failure; message printed to stderr, exit code 1."""


def _fail(message: str) -> "CliError":
    return CliError(message)


def read_kv_file(path: Path) -> dict[str, str]:
    """key = value lines; '#' comments and blank lines ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, val = line.partition("=")
        else:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise _fail(f"{path}:{lineno}: expected 'key = value'")
            key, val = parts
        values[key.strip()] = val.strip()
    return values


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(value: str, target_type) -> object:
    if target_type is bool:
        if value.lower() not in _BOOL:
            raise _fail(f"expected a boolean, got {value!r}")
        return _BOOL[value.lower()]
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is MaskPolicy:
        return MaskPolicy(value)
    return value


def build_config(cls, file_values: dict[str, str], overrides: dict,
                 prefix: str = ""):
    """Layer defaults < file values < explicit overrides into a config
    dataclass; unknown prefixed keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in file_values.items():
        if prefix:
            if not key.startswith(prefix):
                continue
            key = key[len(prefix):]
        elif "." in key or key.startswith(("encoder_", "teacher_")):
            continue
        if key not in fields:
            raise _fail(f"unknown configuration key {prefix}{key!r} for {cls.__name__}")
        kwargs[key] = _coerce(raw, _field_type(cls, key))
    for key, value in overrides.items():
        if value is not None:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise _fail(f"invalid configuration for {cls.__name__}: {exc}") from exc


def _field_type(cls, name: str):
    import typing
    hints = typing.get_type_hints(cls)
    return hints[name]


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def check_outputs(paths: Sequence[Path], force: bool) -> None:
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        raise _fail("refusing to overwrite existing output "
                    f"{existing[0]} (use --force)")


def write_manifest(path: Path, command: str, config: dict,
                   inputs: dict[str, Path]) -> None:
    lines = [f"command = {command}",
             f"version = {__version__}",
             f"timestamp = {time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())}"]
    for key in sorted(config):
        lines.append(f"config.{key} = {config[key]}")
    for name in sorted(inputs):
        p = inputs[name]
        lines.append(f"input.{name}.path = {p}")
        lines.append(f"input.{name}.sha256 = {sha256_file(p)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _config_values(args) -> dict[str, str]:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise _fail(f"config file not found: {path}")
        return read_kv_file(path)
    return {}


def _load_data_dir(data_dir: Path, teacher_files: bool = False) -> Corpus:
    names = TEACHER_FILES if teacher_files else STUDENT_FILES
    documents = []
    for name in names:
        path = data_dir / name
        if not path.exists():
            raise _fail(f"missing corpus file: {path}")
        documents.extend(load_corpus(path).documents)
    return Corpus(documents)


def _load_lexicon(data_dir: Path) -> Lexicon:
    path = data_dir / LEXICON_FILE
    if not path.exists():
        raise _fail(f"missing lexicon file: {path}")
    return Lexicon.from_file(path)


def _encoder_config(file_values: dict[str, str], vocab_size: int,
                    args) -> EncoderConfig:
    overrides = {"vocab_size": vocab_size}
    return build_config(EncoderConfig, file_values, overrides, prefix="encoder_")


def _train_config(file_values: dict[str, str], args,
                  extra_overrides: Optional[dict] = None) -> TrainConfig:
    overrides = dict(extra_overrides or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return build_config(TrainConfig, file_values, overrides)


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out)
    file_values = _config_values(args)
    config = build_config(GeneratorConfig, file_values,
                          {"seed": args.seed} if args.seed is not None else {})
    teacher_overrides = {}
    for key, raw in file_values.items():
        if key.startswith("teacher_"):
            name = key[len("teacher_"):]
            teacher_overrides[name] = _coerce(raw, _field_type(GeneratorConfig, name))

    outputs = [out_dir / n for n in STUDENT_FILES + TEACHER_FILES] + [
        out_dir / LEXICON_FILE, out_dir / EMERGENCY_FILE,
        out_dir / "stats.txt", out_dir / "stats.kv"]
    check_outputs(outputs, args.force)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest_config = {k: v for k, v in dataclasses.asdict(config).items()}
    manifest_config.update({f"teacher_{k}": v for k, v in teacher_overrides.items()})
    inputs = {"config": Path(args.config)} if args.config else {}
    write_manifest(out_dir / "manifest.kv", "gen-data", manifest_config, inputs)

    student, teacher = generate_suite(config, teacher_overrides or None)
    for split, name in zip(("train", "dev", "test"), STUDENT_FILES):
        save_corpus(student, out_dir / name, splits=(split,))
    for split, name in zip(("train", "dev", "test"), TEACHER_FILES):
        save_corpus(teacher, out_dir / name, splits=(split,))
    student.lexicon.to_file(out_dir / LEXICON_FILE)
    Lexicon(student.emergency_terms).to_file(out_dir / EMERGENCY_FILE)

    stats = corpus_stats(student)
    (out_dir / "stats.txt").write_text(stats.format_table() + "\n", encoding="utf-8")
    (out_dir / "stats.kv").write_text("\n".join(stats.kv_lines()) + "\n",
                                      encoding="utf-8")
    _log(f"wrote corpus ({len(student)} student docs, {len(teacher)} teacher docs) "
         f"to {out_dir}")
    _log(stats.format_table())
    return 0


def cmd_train_tokenizer(args) -> int:
    data_dir = Path(args.data)
    out_path = Path(args.out)
    check_outputs([out_path], args.force)
    texts = []
    inputs = {}
    for name in STUDENT_FILES + TEACHER_FILES:
        path = data_dir / name
        if path.exists():
            inputs[name] = path
            texts.extend(d.text for d in load_corpus(path).documents)
    if not texts:
        raise _fail(f"no corpus files found under {data_dir}")
    vocab = train_bpe(texts, vocab_size=args.vocab_size)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(out_path.with_suffix(out_path.suffix + ".manifest.kv"),
                   "train-tokenizer", {"vocab_size": args.vocab_size}, inputs)
    save_vocab(vocab, out_path)
    _log(f"trained tokenizer with {len(vocab)} tokens ({len(vocab.merges)} merges) "
         f"-> {out_path}")
    return 0


def _prepare(data_dir: Path, vocab_path: Path, policy: MaskPolicy,
             encoder_values: dict[str, str], args, teacher_corpus: bool = False):
    vocab = load_vocab(vocab_path)
    corpus = _load_data_dir(data_dir, teacher_files=teacher_corpus)
    lexicon = _load_lexicon(data_dir)
    encoder_config = _encoder_config(encoder_values, len(vocab), args)
    data = prepare_task_data(corpus, vocab, lexicon, encoder_config.max_len, policy)
    return data, encoder_config, vocab


def cmd_pretrain_teacher(args) -> int:
    out_dir = Path(args.out)
    outputs = [out_dir / "teacher.ckpt", out_dir / "record.txt",
               out_dir / "metrics_test.kv", out_dir / "metrics_test.txt"]
    check_outputs(outputs, args.force)
    file_values = _config_values(args)
    config = _train_config(file_values, args)
    data, encoder_config, _ = _prepare(
        Path(args.data), Path(args.vocab), MaskPolicy(args.mask_policy),
        file_values, args, teacher_corpus=True)

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_config = dict(_flat_config(config, encoder_config))
    inputs = {"vocab": Path(args.vocab)}
    inputs.update({n: Path(args.data) / n for n in TEACHER_FILES})
    if args.config:
        inputs["config"] = Path(args.config)
    write_manifest(out_dir / "manifest.kv", "pretrain-teacher", manifest_config, inputs)

    result = pretrain_teacher(data, config, encoder_config)
    save_checkpoint(result.model, out_dir / "teacher.ckpt",
                    extra={"tokenizer_digest": sha256_file(Path(args.vocab)),
                           "role": "teacher"})
    result.record.save(out_dir / "record.txt")
    _write_metrics(out_dir, "teacher", result)
    _log(f"teacher best epoch {result.record.best_epoch}, "
         f"test AUROC {result.record.test.auroc}")
    return 0


def _flat_config(config: TrainConfig, encoder_config: EncoderConfig) -> dict:
    out = {k: (v.value if isinstance(v, MaskPolicy) else v)
           for k, v in dataclasses.asdict(config).items()}
    out.update({f"encoder_{k}": v
                for k, v in dataclasses.asdict(encoder_config).items()})
    return out


def _write_metrics(out_dir: Path, name: str, result) -> None:
    report = result.record.test
    (out_dir / "metrics_test.kv").write_text(
        "\n".join(report.kv_lines()) + "\n", encoding="utf-8")
    (out_dir / "metrics_test.txt").write_text(
        format_metric_table([(name, report)]) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    outputs = [out_dir / "student.ckpt", out_dir / "record.txt",
               out_dir / "metrics_test.kv", out_dir / "metrics_test.txt"]
    check_outputs(outputs, args.force)
    file_values = _config_values(args)
    overrides = {}
    if args.no_hidn:
        overrides["enable_hidn"] = False
    if args.no_attn:
        overrides["enable_attn"] = False
    overrides["mask_policy"] = MaskPolicy(args.mask_policy)
    config = _train_config(file_values, args, overrides)
    data, encoder_config, _ = _prepare(
        Path(args.data), Path(args.vocab), config.mask_policy, file_values, args)

    teacher = None
    if args.teacher:
        teacher, extra = load_checkpoint(args.teacher)
        vocab_digest = sha256_file(Path(args.vocab))
        if extra.get("tokenizer_digest") not in (None, vocab_digest):
            raise _fail(f"teacher checkpoint {args.teacher} was trained with a "
                        "different tokenizer than --vocab")

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_config = _flat_config(config, encoder_config)
    inputs = {"vocab": Path(args.vocab)}
    inputs.update({n: Path(args.data) / n for n in STUDENT_FILES})
    if args.teacher:
        inputs["teacher"] = Path(args.teacher)
    if args.config:
        inputs["config"] = Path(args.config)
    write_manifest(out_dir / "manifest.kv", "train", manifest_config, inputs)

    result = train_student(data, teacher, config, encoder_config)
    save_checkpoint(result.model, out_dir / "student.ckpt",
                    extra={"tokenizer_digest": sha256_file(Path(args.vocab)),
                           "role": "student_kd" if args.teacher else "student_alone"})
    result.record.save(out_dir / "record.txt")
    _write_metrics(out_dir, "student", result)
    _log(f"student best epoch {result.record.best_epoch}, "
         f"test AUROC {result.record.test.auroc}")
    return 0


def cmd_eval(args) -> int:
    out_path = Path(args.out)
    check_outputs([out_path], args.force)
    model, _ = load_checkpoint(args.ckpt)
    vocab = load_vocab(args.vocab)
    if model.config.vocab_size != len(vocab):
        raise _fail(f"checkpoint vocabulary size {model.config.vocab_size} does not "
                    f"match --vocab ({len(vocab)} tokens)")
    data_dir = Path(args.data)
    corpus = _load_data_dir(data_dir, teacher_files=args.teacher_corpus)
    lexicon = _load_lexicon(data_dir)
    data = prepare_task_data(corpus, vocab, lexicon, model.config.max_len,
                             MaskPolicy(args.mask_policy))
    examples = getattr(data, args.split)
    if not examples:
        raise _fail(f"split {args.split!r} is empty")
    report = evaluate(model, examples)

    lines = report.kv_lines()
    scores, labels = predict_scores(model, examples)
    correct = [ex.text for ex, s, y in zip(examples, scores, labels)
               if (s >= 0.5) == bool(y)]
    mwps_report = mwps(correct, lexicon)
    lines += [f"mwps.{l}" for l in mwps_report.kv_lines()]

    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(out_path.with_suffix(out_path.suffix + ".manifest.kv"), "eval",
                   {"split": args.split, "mask_policy": args.mask_policy},
                   {"ckpt": Path(args.ckpt), "vocab": Path(args.vocab)})
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _log(format_metric_table([(Path(args.ckpt).stem, report)]))
    return 0


def _parse_grid(path: Path) -> list[dict]:
    """One override set per line: label then key=value pairs."""
    grid = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        cell: dict = {"label": parts[0]}
        for token in parts[1:]:
            if "=" not in token:
                raise _fail(f"{path}:{lineno}: expected key=value, got {token!r}")
            key, _, val = token.partition("=")
            if key == "seeds":
                cell["seeds"] = [int(s) for s in val.split(",")]
            else:
                cell[key] = _coerce(val, _field_type(TrainConfig, key))
        grid.append(cell)
    if not grid:
        raise _fail(f"grid file {path} defines no cells")
    return grid


def cmd_ablate(args) -> int:
    out_dir = Path(args.out)
    outputs = [out_dir / "ablation.txt", out_dir / "ablation.kv"]
    check_outputs(outputs, args.force)
    grid = _parse_grid(Path(args.grid))
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
        for cell in grid:
            cell.setdefault("seeds", seeds)
    file_values = _config_values(args)
    config = _train_config(file_values, args)
    data, encoder_config, _ = _prepare(
        Path(args.data), Path(args.vocab), config.mask_policy, file_values, args)
    teacher = None
    if args.teacher:
        teacher, _ = load_checkpoint(args.teacher)

    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = {"vocab": Path(args.vocab), "grid": Path(args.grid)}
    if args.teacher:
        inputs["teacher"] = Path(args.teacher)
    if args.config:
        inputs["config"] = Path(args.config)
    write_manifest(out_dir / "manifest.kv", "ablate",
                   _flat_config(config, encoder_config), inputs)

    cells = ablation_grid(data, teacher, config, encoder_config, grid)
    table = format_ablation_table(cells)
    (out_dir / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    kv_lines = []
    for cell in cells:
        for metric in ("auroc", "auprc", "f1"):
            mean, sd = cell.metric_stats(metric)
            kv_lines.append(f"{cell.label}.{metric}.mean {mean!r}")
            kv_lines.append(f"{cell.label}.{metric}.sd {sd!r}")
    (out_dir / "ablation.kv").write_text("\n".join(kv_lines) + "\n", encoding="utf-8")
    _log(table)
    return 0


def cmd_export_embeddings(args) -> int:
    out_path = Path(args.out)
    check_outputs([out_path], args.force)
    vocab = load_vocab(args.vocab)
    data_dir = Path(args.data)
    corpus = _load_data_dir(data_dir)
    lexicon = _load_lexicon(data_dir)
    rows = []
    inputs = {"vocab": Path(args.vocab)}
    for entry in args.ckpts:
        if "=" not in entry:
            raise _fail(f"--ckpts entries must be tag=path, got {entry!r}")
        tag, _, path = entry.partition("=")
        model, _ = load_checkpoint(path)
        data = prepare_task_data(corpus, vocab, lexicon, model.config.max_len,
                                 MaskPolicy(args.mask_policy))
        rows.extend(collect_embedding_rows(model, data.test, tag,
                                           max_docs=args.max_docs))
        inputs[tag] = Path(path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(out_path.with_suffix(out_path.suffix + ".manifest.kv"),
                   "export-embeddings", {"max_docs": args.max_docs}, inputs)
    export_embeddings(rows, out_path)
    _log(f"wrote {len(rows)} embedding rows to {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="domainkd",
        description="Domain knowledge distillation workflow for code-switched "
                    "clinical-style text classification.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")
        if config:
            p.add_argument("--config", default=None, help="key = value config file")

    p = sub.add_parser("gen-data", help="generate the synthetic corpora")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-tokenizer", help="train the shared subword vocabulary")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=2048)
    common(p, config=False)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("pretrain-teacher", help="train and freeze the teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-policy", choices=[m.value for m in MaskPolicy],
                   default=MaskPolicy.ALL_DOMAIN_SCRIPT.value)
    common(p)
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("train", help="train a student (baseline or distilled)")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--teacher", default=None, help="teacher checkpoint (optional)")
    p.add_argument("--out", required=True)
    p.add_argument("--no-hidn", action="store_true",
                   help="disable hidden-state distillation")
    p.add_argument("--no-attn", action="store_true",
                   help="disable attention distillation")
    p.add_argument("--mask-policy", choices=[m.value for m in MaskPolicy],
                   default=MaskPolicy.ALL_DOMAIN_SCRIPT.value)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="metrics key-value output file")
    p.add_argument("--split", choices=["train", "dev", "test"], default="test")
    p.add_argument("--teacher-corpus", action="store_true",
                   help="evaluate on the teacher_* corpus files")
    p.add_argument("--mask-policy", choices=[m.value for m in MaskPolicy],
                   default=MaskPolicy.ALL_DOMAIN_SCRIPT.value)
    common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a grid of loss-configuration cells")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--teacher", default=None)
    p.add_argument("--grid", required=True,
                   help="text file: one cell per line, label then key=value pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None,
                   help="comma-separated seeds applied to every cell")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-embeddings",
                       help="dump [CLS] and knowledge-word vectors to TSV")
    p.add_argument("--ckpts", nargs="+", required=True,
                   help="tag=path entries; tags: student_alone student_kd teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-docs", type=int, default=100)
    p.add_argument("--mask-policy", choices=[m.value for m in MaskPolicy],
                   default=MaskPolicy.ALL_DOMAIN_SCRIPT.value)
    common(p, config=False)
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValidationError, ParseError, StateError,
            DimensionError, FileNotFoundError) as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
