"""Pre-norm transformer encoder classifier that can expose every layer's
hidden states and attention probabilities for distillation.

hidden[0] is the embedding-layer output (token + learned position
embeddings); hidden[p] for p >= 1 is the output of block p. Attention is
captured post-softmax, pre-dropout. The classifier is a linear map over
the [CLS] position of the final hidden state.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor, ValidationError
from .bpe import PAD_ID

CHECKPOINT_MAGIC = "DKD-CKPT-1"


@dataclass(frozen=True)
class EncoderConfig:
    p_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    max_len: int = 64
    ffn_mult: int = 4
    vocab_size: int = 1024
    dropout: float = 0.0

    def __post_init__(self):
        if self.p_layers < 1:
            raise ValidationError(f"p_layers must be >= 1, got {self.p_layers}")
        if self.max_len < 2:
            raise ValidationError(f"max_len must be >= 2, got {self.max_len}")
        if self.d_model % self.n_heads != 0:
            raise ValidationError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class EncoderOutput:
    """hidden: P+1 tensors of (b, l, d); attn: P tensors of (b, h, l, l);
    logits: (b, 2). hidden/attn are empty when capture was off. Batches
    may be trimmed to their longest row; full_len records the model's
    configured max_len so losses can normalize against it."""

    hidden: list[Tensor]
    attn: list[Tensor]
    logits: Tensor
    pad_mask: np.ndarray  # (b, l) bool, True on pads
    full_len: int

    @property
    def scores(self) -> np.ndarray:
        """Probability of the positive class per example."""
        z = self.logits.data
        zmax = z.max(axis=1, keepdims=True)
        e = np.exp(z - zmax)
        return e[:, 1] / e.sum(axis=1)


class Encoder:
    """Parameter container plus forward pass. Single-threaded training;
    read-only forward is safe to share."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.frozen = False
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE0C0DE]))
        d, m = config.d_model, config.ffn_mult * config.d_model

        def w(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape), requires_grad=True)

        self.params: dict[str, Tensor] = {}
        p = self.params
        p["tok_emb"] = w(config.vocab_size, d)
        p["pos_emb"] = w(config.max_len, d)
        for i in range(config.p_layers):
            p[f"layer{i}.ln1.gain"] = ones(d)
            p[f"layer{i}.ln1.bias"] = zeros(d)
            for name in ("wq", "wk", "wv", "wo"):
                p[f"layer{i}.attn.{name}"] = w(d, d)
                p[f"layer{i}.attn.b{name[1]}"] = zeros(d)
            p[f"layer{i}.ln2.gain"] = ones(d)
            p[f"layer{i}.ln2.bias"] = zeros(d)
            p[f"layer{i}.ffn.w1"] = w(d, m)
            p[f"layer{i}.ffn.b1"] = zeros(m)
            p[f"layer{i}.ffn.w2"] = w(m, d)
            p[f"layer{i}.ffn.b2"] = zeros(d)
        p["cls.w"] = w(d, 2)
        p["cls.b"] = zeros(2)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def body_parameters(self) -> list[Tensor]:
        return [t for n, t in self.params.items() if not n.startswith("cls.")]

    def classifier_parameters(self) -> list[Tensor]:
        return [t for n, t in self.params.items() if n.startswith("cls.")]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def copy(self) -> "Encoder":
        clone = Encoder(self.config, seed=0)
        for name, t in self.params.items():
            clone.params[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        clone.frozen = self.frozen
        return clone

    def state_digest(self) -> float:
        """Cheap change detector for freeze tests."""
        return float(sum(np.abs(t.data).sum() for t in self.params.values()))

    def forward(self, ids: np.ndarray, capture: bool = True,
                training: bool = False,
                rng: Optional[np.random.Generator] = None) -> EncoderOutput:
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        b, L = ids.shape
        if L > cfg.max_len:
            raise ValidationError(f"sequence length {L} exceeds max_len {cfg.max_len}")
        if ids.size and int(ids.max()) >= cfg.vocab_size:
            raise ValidationError(
                f"token id {int(ids.max())} outside vocabulary of {cfg.vocab_size}")
        drop = cfg.dropout if training else 0.0
        if drop > 0.0 and rng is None:
            raise ValidationError("training forward with dropout needs an rng")

        p = self.params
        pad = ids == PAD_ID
        key_bias = Tensor(np.where(pad, -1e30, 0.0)[:, None, None, :])
        h_count = cfg.n_heads
        dh = cfg.d_model // h_count
        scale = 1.0 / np.sqrt(dh)

        x = ag.add(ag.embedding(p["tok_emb"], ids),
                   ag.embedding(p["pos_emb"], np.arange(L)))
        hidden: list[Tensor] = [x] if capture else []
        attns: list[Tensor] = []
        if drop > 0.0:
            x = ag.dropout(x, drop, rng)

        for i in range(cfg.p_layers):
            normed = ag.layernorm(x, p[f"layer{i}.ln1.gain"], p[f"layer{i}.ln1.bias"])

            def heads(t: Tensor) -> Tensor:
                return ag.transpose(ag.reshape(t, (b, L, h_count, dh)), (0, 2, 1, 3))

            q = heads(ag.add(ag.matmul(normed, p[f"layer{i}.attn.wq"]), p[f"layer{i}.attn.bq"]))
            k = heads(ag.add(ag.matmul(normed, p[f"layer{i}.attn.wk"]), p[f"layer{i}.attn.bk"]))
            v = heads(ag.add(ag.matmul(normed, p[f"layer{i}.attn.wv"]), p[f"layer{i}.attn.bv"]))
            scores = ag.add(ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), scale),
                            key_bias)
            attn = ag.softmax_lastdim(scores)
            if capture:
                attns.append(attn)
            attn_used = ag.dropout(attn, drop, rng) if drop > 0.0 else attn
            ctx = ag.reshape(ag.transpose(ag.matmul(attn_used, v), (0, 2, 1, 3)), (b, L, cfg.d_model))
            proj = ag.add(ag.matmul(ctx, p[f"layer{i}.attn.wo"]), p[f"layer{i}.attn.bo"])
            if drop > 0.0:
                proj = ag.dropout(proj, drop, rng)
            x = ag.add(x, proj)

            normed2 = ag.layernorm(x, p[f"layer{i}.ln2.gain"], p[f"layer{i}.ln2.bias"])
            ff = ag.add(ag.matmul(ag.gelu(
                ag.add(ag.matmul(normed2, p[f"layer{i}.ffn.w1"]), p[f"layer{i}.ffn.b1"])),
                p[f"layer{i}.ffn.w2"]), p[f"layer{i}.ffn.b2"])
            if drop > 0.0:
                ff = ag.dropout(ff, drop, rng)
            x = ag.add(x, ff)
            if capture:
                hidden.append(x)

        logits = ag.add(ag.matmul(ag.token_at(x, 0), p["cls.w"]), p["cls.b"])
        return EncoderOutput(hidden=hidden, attn=attns, logits=logits, pad_mask=pad,
                             full_len=cfg.max_len)


def freeze(model: Encoder) -> Encoder:
    """Exclude every parameter from gradient recording and optimizer updates.
    Forward passes stay fully capturable."""
    for t in model.params.values():
        t.requires_grad = False
    model.frozen = True
    return model


def extract_cls_embeddings(model: Encoder, ids: np.ndarray) -> np.ndarray:
    """Final-layer [CLS] hidden vectors, (batch, d_model)."""
    out = model.forward(ids, capture=True)
    return out.hidden[-1].data[:, 0, :].copy()


def save_checkpoint(model: Encoder, path: str | Path,
                    extra: Optional[dict] = None) -> None:
    """Self-describing container: magic line, JSON meta line (config, param
    manifest, extra), then raw little-endian float64 blobs in manifest
    order. Written atomically."""
    path = Path(path)
    names = list(model.params)
    meta = {
        "config": dataclasses.asdict(model.config),
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write((CHECKPOINT_MAGIC + "\n").encode("ascii"))
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode("utf-8"))
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[Encoder, dict]:
    """Returns the rebuilt model plus the saved extra metadata."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii").strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: not a checkpoint (magic {magic!r})")
        meta = json.loads(fh.readline().decode("utf-8"))
        model = Encoder(EncoderConfig(**meta["config"]), seed=0)
        for spec in meta["params"]:
            name, shape = spec["name"], tuple(spec["shape"])
            if name not in model.params or model.params[name].shape != shape:
                raise ValidationError(f"{path}: unexpected parameter {name} {shape}")
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValidationError(f"{path}: truncated data for {name}")
            model.params[name] = Tensor(
                np.frombuffer(buf, dtype="<f8").reshape(shape).copy(),
                requires_grad=True)
    return model, meta.get("extra", {})
