"""scikit-learn style wrapper around the whole pipeline.

``fit(X, y)`` takes image embeddings and report texts, builds the
vocabulary, pretrains the language model on the reports, then trains the
mapping network (and, in fine-tuning mode, the LM) on the pairs.
``predict(X)`` generates reports; ``score(X, y)`` is corpus BLEU-4.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import numerics as nx
from .corpus import EmbeddingRecord, SplitSet, build_vocab, preprocess_report
from .exceptions import DimensionError, EmptyReportError, InvalidInputError
from .generate import DecodeConfig, generate_reports
from .lm import LMConfig, lm_pretrain
from .mapper import MapperConfig, mapper_init
from .metrics import corpus_bleu
from .numerics import AdamHyper
from .trainer import TrainConfig, TrainMode, train


def check_embeddings(X, clip_dim: int | None = None) -> np.ndarray:
    """Validate embeddings and return them as a float32 [n, clip_dim] array."""
    try:
        arr = np.asarray(X, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"embeddings are not numeric: {exc}") from None
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InvalidInputError(f"expected a non-empty 2-D array of embeddings, got shape {arr.shape}")
    if clip_dim is not None and arr.shape[1] != clip_dim:
        raise DimensionError(f"embeddings have {arr.shape[1]} features, expected {clip_dim}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("embeddings contain NaN or infinity")
    return arr.astype(nx.DTYPE)


def check_reports(y, n: int | None = None) -> list[str]:
    """Preprocess report texts; every report must survive preprocessing."""
    if isinstance(y, str):
        raise InvalidInputError("expected a sequence of reports, got a single string")
    reports = list(y)
    if n is not None and len(reports) != n:
        raise InvalidInputError(f"got {len(reports)} reports for {n} embeddings")
    out = []
    for i, text in enumerate(reports):
        if not isinstance(text, str):
            raise InvalidInputError(f"report {i} is {type(text).__name__}, not str")
        try:
            out.append(preprocess_report(text))
        except EmptyReportError:
            raise InvalidInputError(f"report {i} is empty after preprocessing") from None
    return out


class PrefixReportGenerator(BaseEstimator):
    """Embedding-to-report generator with a frozen (or fine-tuned) LM.

    Parameters mirror :class:`LMConfig`, :class:`MapperConfig` and
    :class:`TrainConfig`. ``beam_width=1`` decodes greedily.

    Attributes set by ``fit``: ``vocab_``, ``lm_``, ``mapper_``,
    ``pretrain_history_`` and ``history_`` (per-epoch losses),
    ``n_features_in_``.
    """

    def __init__(
        self,
        d_model: int = 256,
        lm_layers: int = 2,
        lm_heads: int = 4,
        max_seq: int = 128,
        clip_length: int = 4,
        prefix_length: int = 8,
        mapper_layers: int = 1,
        mapper_heads: int = 4,
        pretrain_epochs: int = 10,
        epochs: int = 30,
        batch_size: int = 16,
        learning_rate: float = 1e-3,
        mode: str = "prefix",
        beam_width: int = 1,
        max_len: int = 64,
        random_state: int = 0,
    ):
        self.d_model = d_model
        self.lm_layers = lm_layers
        self.lm_heads = lm_heads
        self.max_seq = max_seq
        self.clip_length = clip_length
        self.prefix_length = prefix_length
        self.mapper_layers = mapper_layers
        self.mapper_heads = mapper_heads
        self.pretrain_epochs = pretrain_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.mode = mode
        self.beam_width = beam_width
        self.max_len = max_len
        self.random_state = random_state

    def _records(self, X, reports, split):
        return [EmbeddingRecord(f"{split}-{i:06d}", "PA", x, r) for i, (x, r) in enumerate(zip(X, reports))]

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_embeddings(X)
        reports = check_reports(y, len(X))
        val = []
        if X_val is not None:
            Xv = check_embeddings(X_val, X.shape[1])
            val = self._records(Xv, check_reports(y_val, len(Xv)), "val")
        adam = AdamHyper(lr=self.learning_rate)
        seed = int(self.random_state)
        self.vocab_ = build_vocab(reports)
        lm_config = LMConfig(len(self.vocab_), self.d_model, self.lm_layers, self.lm_heads, self.max_seq)
        pre = lm_pretrain(reports, self.vocab_, lm_config, epochs=self.pretrain_epochs, seed=seed,
                          batch_size=self.batch_size, adam=adam)
        mapper = mapper_init(
            MapperConfig(X.shape[1], self.d_model, self.clip_length, self.prefix_length,
                         self.mapper_layers, self.mapper_heads),
            seed=seed,
        )
        config = TrainConfig(mode=TrainMode(self.mode), epochs=self.epochs, batch_size=self.batch_size,
                             adam=adam, seed=seed)
        splits = SplitSet(train=self._records(X, reports, "train"), val=val)
        result = train(splits, pre.lm, mapper, self.vocab_, config)
        self.lm_ = result.model.lm
        self.mapper_ = result.model.mapper
        self.pretrain_history_ = pre.log
        self.history_ = result.log
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "mapper_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_embeddings(X, self.n_features_in_)
        if self.beam_width > 1:
            decode = DecodeConfig("beam", self.beam_width, self.max_len)
        else:
            decode = DecodeConfig("greedy", max_len=self.max_len)
        return np.array(generate_reports(self.lm_, self.mapper_, self.vocab_, X, decode), dtype=object)

    def score(self, X, y) -> float:
        """Corpus BLEU-4 of the generated reports against ``y``."""
        hyps = self.predict(X)
        refs = check_reports(y, len(hyps))
        return corpus_bleu(zip(hyps, refs)).bleu4
