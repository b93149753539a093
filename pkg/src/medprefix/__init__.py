"""Radiology report generation by prefix-conditioning a frozen language model.

A transformer mapping network turns an image embedding into a handful of
continuous prefix vectors; a small decoder-only language model, pretrained
on report text and then frozen, generates the report conditioned on them.
Everything (autodiff included) is implemented on numpy.
"""

from .corpus import EmbeddingRecord, SplitSet, Vocabulary, build_vocab, load_dataset, save_dataset
from .estimator import PrefixReportGenerator
from .generate import DecodeConfig, beam_decode, greedy_decode
from .lm import LMConfig, lm_init, lm_pretrain
from .mapper import MapperConfig, count_params, map_embedding, mapper_init
from .metrics import corpus_bleu, evaluate_split
from .synth import SynthConfig, gen_basis, gen_split
from .trainer import ReportModel, TrainConfig, TrainMode, train

__version__ = "0.1.0"

__all__ = [
    "DecodeConfig",
    "EmbeddingRecord",
    "LMConfig",
    "MapperConfig",
    "PrefixReportGenerator",
    "ReportModel",
    "SplitSet",
    "SynthConfig",
    "TrainConfig",
    "TrainMode",
    "Vocabulary",
    "beam_decode",
    "build_vocab",
    "corpus_bleu",
    "count_params",
    "evaluate_split",
    "gen_basis",
    "gen_split",
    "greedy_decode",
    "lm_init",
    "lm_pretrain",
    "load_dataset",
    "map_embedding",
    "mapper_init",
    "save_dataset",
    "train",
]
