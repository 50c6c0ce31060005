import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from domainkd.cli import main, read_kv_file

TINY_GEN = """
n_train = 90
n_dev = 40
n_test = 40
lexicon_size = 60
local_pool_size = 80
filler_pool_size = 80
seed = 13
teacher_n_train = 120
"""

TINY_TRAIN = """
epochs = 2
patience = 1
batch_size = 16
encoder_p_layers = 1
encoder_d_model = 16
encoder_n_heads = 2
encoder_max_len = 48
encoder_ffn_mult = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.cfg").write_text(TINY_GEN, encoding="utf-8")
    (root / "train.cfg").write_text(TINY_TRAIN, encoding="utf-8")
    data = root / "data"
    assert main(["gen-data", "--config", str(root / "gen.cfg"),
                 "--out", str(data)]) == 0
    assert main(["train-tokenizer", "--data", str(data),
                 "--out", str(root / "vocab.txt"), "--vocab-size", "360"]) == 0
    return root


def test_gen_data_outputs_present(workspace):
    data = workspace / "data"
    for name in ("train.tsv", "dev.tsv", "test.tsv", "teacher_train.tsv",
                 "teacher_dev.tsv", "teacher_test.tsv", "lexicon.txt",
                 "emergency_terms.txt", "stats.txt", "stats.kv", "manifest.kv"):
        assert (data / name).exists(), name


def test_gen_data_refuses_overwrite(workspace, capsys):
    code = main(["gen-data", "--config", str(workspace / "gen.cfg"),
                 "--out", str(workspace / "data")])
    assert code == 1
    assert "--force" in capsys.readouterr().err


def test_gen_data_deterministic_rerun(workspace, tmp_path):
    out2 = tmp_path / "data2"
    assert main(["gen-data", "--config", str(workspace / "gen.cfg"),
                 "--out", str(out2)]) == 0
    for name in ("train.tsv", "teacher_train.tsv", "lexicon.txt"):
        a = (workspace / "data" / name).read_bytes()
        b = (out2 / name).read_bytes()
        assert a == b, name


def test_gen_data_bad_ratios_fail(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("ratio_local = 0.9\nratio_domain = 0.9\nratio_other = 0.9\n",
                   encoding="utf-8")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "ratio" in capsys.readouterr().err


def test_unknown_config_key_fails(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("n_trian = 100\n", encoding="utf-8")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "n_trian" in capsys.readouterr().err


def test_manifest_contains_digests_and_version(workspace):
    manifest = read_kv_file(workspace / "data" / "manifest.kv")
    assert manifest["command"] == "gen-data"
    assert manifest["config.n_train"] == "90"
    assert manifest["input.config.sha256"]


@pytest.fixture(scope="module")
def trained(workspace):
    root = workspace
    data, vocab = str(root / "data"), str(root / "vocab.txt")
    assert main(["pretrain-teacher", "--data", data, "--vocab", vocab,
                 "--config", str(root / "train.cfg"),
                 "--out", str(root / "teacher")]) == 0
    assert main(["train", "--data", data, "--vocab", vocab,
                 "--config", str(root / "train.cfg"),
                 "--out", str(root / "baseline")]) == 0
    assert main(["train", "--data", data, "--vocab", vocab,
                 "--teacher", str(root / "teacher" / "teacher.ckpt"),
                 "--config", str(root / "train.cfg"),
                 "--out", str(root / "kd")]) == 0
    return root


def test_train_outputs(trained):
    for run in ("teacher", "baseline", "kd"):
        for name in ("record.txt", "metrics_test.kv", "metrics_test.txt",
                     "manifest.kv"):
            assert (trained / run / name).exists(), (run, name)
    assert (trained / "teacher" / "teacher.ckpt").exists()
    assert (trained / "kd" / "student.ckpt").exists()


def test_loss_switch_flags_zero_components(trained, tmp_path):
    data, vocab = str(trained / "data"), str(trained / "vocab.txt")
    out = tmp_path / "switched"
    assert main(["train", "--data", data, "--vocab", vocab,
                 "--teacher", str(trained / "teacher" / "teacher.ckpt"),
                 "--config", str(trained / "train.cfg"),
                 "--no-hidn", "--no-attn", "--out", str(out)]) == 0
    record = (out / "record.txt").read_text(encoding="utf-8")
    for line in record.splitlines():
        if line.strip().startswith(tuple("123456789")):
            cells = line.split()
            assert float(cells[3]) == 0.0  # train_hidn
            assert float(cells[4]) == 0.0  # train_attn


def test_eval_reproduces_training_metrics(trained, tmp_path):
    out = tmp_path / "eval.kv"
    assert main(["eval", "--ckpt", str(trained / "kd" / "student.ckpt"),
                 "--data", str(trained / "data"),
                 "--vocab", str(trained / "vocab.txt"),
                 "--out", str(out)]) == 0
    got = read_kv_file(out)
    want = read_kv_file(trained / "kd" / "metrics_test.kv")
    for key in ("accuracy", "auroc", "auprc", "f1"):
        assert abs(float(got[key]) - float(want[key])) < 1e-9
    assert "mwps.mwps" in got


def test_eval_rejects_wrong_vocab(trained, tmp_path, capsys):
    other_vocab = tmp_path / "other_vocab.txt"
    assert main(["train-tokenizer", "--data", str(trained / "data"),
                 "--out", str(other_vocab), "--vocab-size", "300"]) == 0
    assert main(["eval", "--ckpt", str(trained / "kd" / "student.ckpt"),
                 "--data", str(trained / "data"), "--vocab", str(other_vocab),
                 "--out", str(tmp_path / "m.kv")]) == 1
    assert "vocab" in capsys.readouterr().err.lower()


def test_teacher_tokenizer_mismatch_rejected(trained, tmp_path, capsys):
    # a vocab with identical size but different content: digest check trips
    data = str(trained / "data")
    v2 = tmp_path / "vocab2.txt"
    text = (trained / "vocab.txt").read_text(encoding="utf-8")
    v2.write_text(text.replace("#MERGES", "#MERGES", 1) + "\n", encoding="utf-8")
    code = main(["train", "--data", data, "--vocab", str(v2),
                 "--teacher", str(trained / "teacher" / "teacher.ckpt"),
                 "--config", str(trained / "train.cfg"),
                 "--out", str(tmp_path / "run")])
    assert code == 1
    assert "tokenizer" in capsys.readouterr().err


def test_ablate_grid(trained, tmp_path):
    grid = tmp_path / "grid.txt"
    grid.write_text("full\nno_distill enable_hidn=false enable_attn=false\n",
                    encoding="utf-8")
    out = tmp_path / "ablation"
    assert main(["ablate", "--data", str(trained / "data"),
                 "--vocab", str(trained / "vocab.txt"),
                 "--teacher", str(trained / "teacher" / "teacher.ckpt"),
                 "--grid", str(grid), "--config", str(trained / "train.cfg"),
                 "--out", str(out)]) == 0
    table = (out / "ablation.txt").read_text(encoding="utf-8")
    assert "full" in table and "no_distill" in table
    kv = read_kv_file(out / "ablation.kv")
    assert "full.auroc.mean" in kv


def test_export_embeddings(trained, tmp_path):
    out = tmp_path / "emb.tsv"
    assert main(["export-embeddings",
                 "--ckpts",
                 f"student_alone={trained / 'baseline' / 'student.ckpt'}",
                 f"student_kd={trained / 'kd' / 'student.ckpt'}",
                 f"teacher={trained / 'teacher' / 'teacher.ckpt'}",
                 "--data", str(trained / "data"),
                 "--vocab", str(trained / "vocab.txt"),
                 "--out", str(out), "--max-docs", "10"]) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    tags = {line.split("\t")[16] for line in lines[1:]}
    assert tags == {"student_alone", "student_kd", "teacher"}


def test_missing_artifact_names_path(trained, tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nowhere"),
                 "--vocab", str(trained / "vocab.txt"),
                 "--out", str(tmp_path / "x")])
    assert code == 1
    assert "nowhere" in capsys.readouterr().err


def test_train_subcommand_bitwise_deterministic_rerun(trained, tmp_path):
    """Same config and seed, rerun in separate single-threaded processes:
    metrics and checkpoint must match byte for byte."""
    import os
    env = dict(os.environ, OPENBLAS_NUM_THREADS="1", OMP_NUM_THREADS="1")
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        cmd = [sys.executable, "-m", "domainkd", "train",
               "--data", str(trained / "data"),
               "--vocab", str(trained / "vocab.txt"),
               "--config", str(trained / "train.cfg"),
               "--out", str(out)]
        proc = subprocess.run(cmd, capture_output=True, text=True, env=env)
        assert proc.returncode == 0, proc.stderr
        outs.append(out)
    a, b = outs
    assert (a / "metrics_test.kv").read_bytes() == (b / "metrics_test.kv").read_bytes()
    assert (a / "student.ckpt").read_bytes() == (b / "student.ckpt").read_bytes()
    assert (a / "record.txt").read_bytes() == (b / "record.txt").read_bytes()
