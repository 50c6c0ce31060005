"""Small-scale domain knowledge distillation between transformer encoders."""

__version__ = "0.1.0"

from .autograd import GradTape, Tensor, gradcheck
from .bpe import BpeVocab, TokenizedInput, encode, load_vocab, save_vocab, train_bpe
from .corpus import Corpus, Document, GeneratorConfig, corpus_stats, generate, generate_suite
from .distill import LossWeights, PooledKnowledge, layer_loss, pool_attention, pool_hidden, total_loss
from .encoder import Encoder, EncoderConfig, EncoderOutput, extract_cls_embeddings, freeze
from .metrics import MetricReport, MwpsReport, binary_metrics, export_embeddings, mwps
from .textprep import KnowledgeMask, Lexicon, MaskPolicy, Script, build_mask, classify_words, preprocess
from .trainer import TrainConfig, ablation_grid, evaluate, pretrain_teacher, train_student

__all__ = [
    "GradTape", "Tensor", "gradcheck",
    "BpeVocab", "TokenizedInput", "encode", "load_vocab", "save_vocab", "train_bpe",
    "Corpus", "Document", "GeneratorConfig", "corpus_stats", "generate", "generate_suite",
    "LossWeights", "PooledKnowledge", "layer_loss", "pool_attention", "pool_hidden", "total_loss",
    "Encoder", "EncoderConfig", "EncoderOutput", "extract_cls_embeddings", "freeze",
    "MetricReport", "MwpsReport", "binary_metrics", "export_embeddings", "mwps",
    "KnowledgeMask", "Lexicon", "MaskPolicy", "Script", "build_mask", "classify_words", "preprocess",
    "TrainConfig", "ablation_grid", "evaluate", "pretrain_teacher", "train_student",
]
