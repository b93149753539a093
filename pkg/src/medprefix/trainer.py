"""Training the mapping network (optionally together with the LM).

In prefix-tuning mode everything under ``lm.`` is frozen: gradients flow
through the language model into the mapper, but only ``mapper.`` tensors
are updated. Fine-tuning mode updates both.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint
from .corpus import EmbeddingRecord, SplitSet, Vocabulary, encode
from .exceptions import ConfigError, LengthError
from .lm import LanguageModel, LMConfig, lm_init, next_token_targets, pad_batch
from .mapper import MapperConfig, MappingNetwork, mapper_init
from .numerics import AdamHyper, ParameterStore, Tensor

logger = logging.getLogger(__name__)


class TrainMode(str, enum.Enum):
    PREFIX_TUNING = "prefix"
    FINE_TUNING = "finetune"


@dataclass(frozen=True)
class TrainConfig:
    mode: TrainMode = TrainMode.PREFIX_TUNING
    epochs: int = 30
    batch_size: int = 16
    adam: AdamHyper = AdamHyper()
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", TrainMode(self.mode))
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["adam"] = AdamHyper(**d.get("adam", {}))
        return cls(**d)


def freeze_mask(mode: TrainMode) -> set[str]:
    """Name prefixes excluded from updates in the given mode."""
    return {"lm."} if TrainMode(mode) is TrainMode.PREFIX_TUNING else set()


@dataclass
class ReportModel:
    """A language model, a mapper and the vocabulary they share."""

    lm: LanguageModel
    mapper: MappingNetwork | None
    vocab: Vocabulary
    train_config: TrainConfig | None = None

    def store(self) -> ParameterStore:
        if self.mapper is None:
            return self.lm.store
        return ParameterStore.union(self.lm.store, self.mapper.store)

    def copy(self) -> "ReportModel":
        return ReportModel(self.lm.copy(), self.mapper.copy() if self.mapper else None, self.vocab,
                           self.train_config)

    def to_checkpoint(self) -> Checkpoint:
        configs = {
            "lm": self.lm.config.to_dict(),
            "mapper": self.mapper.config.to_dict() if self.mapper else None,
            "train": self.train_config.to_dict() if self.train_config else None,
        }
        tensors = {n: t.data for n, t in self.store().entries.items()}
        return Checkpoint(configs=configs, vocab=self.vocab.tokens, tensors=tensors)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ReportModel":
        lm_cfg = LMConfig(**ckpt.configs["lm"])
        lm = lm_init(lm_cfg)
        mapper = None
        if ckpt.configs.get("mapper"):
            mapper = mapper_init(MapperConfig(**ckpt.configs["mapper"]))
        train_cfg = TrainConfig.from_dict(ckpt.configs["train"]) if ckpt.configs.get("train") else None
        model = cls(lm, mapper, Vocabulary(ckpt.vocab), train_cfg)
        store = model.store()
        if set(ckpt.tensors) != set(store.entries):
            missing = sorted(set(store.entries) ^ set(ckpt.tensors))
            raise ConfigError(f"checkpoint tensors do not match its configs: {missing[:5]}")
        store.load_arrays(ckpt.tensors)
        return model


def trainable_report(lm: LanguageModel, mapper: MappingNetwork, mode: TrainMode) -> dict[str, int]:
    store = ParameterStore.union(lm.store, mapper.store)
    store.freeze(freeze_mask(mode))
    return {"trainable": store.count(trainable_only=True), "total": store.count()}


def loss_step(lm: LanguageModel, mapper: MappingNetwork, records: Sequence[EmbeddingRecord],
              vocab: Vocabulary) -> Tensor:
    """Mean over records of the masked next-token loss given each record's prefix."""
    if not records:
        raise ValueError("empty batch")
    p = mapper.config.prefix_length
    sequences = []
    for rec in records:
        ids = encode(rec.report, vocab)
        if p + len(ids) > lm.config.max_seq:
            raise LengthError(
                f"record {rec.id!r}: {len(ids)} tokens + prefix {p} exceed max_seq={lm.config.max_seq}"
            )
        sequences.append(ids)
    ids, lengths = pad_batch(sequences)
    targets, mask = next_token_targets(ids, lengths, offset=p)
    embeddings = np.stack([rec.embedding for rec in records]).astype(nx.DTYPE)
    prefix = mapper.forward(embeddings)
    return nx.cross_entropy(lm.forward(prefix, ids), targets, mask)


class EpochMetrics(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float | None


@dataclass
class TrainResult:
    model: ReportModel
    log: list[EpochMetrics] = field(default_factory=list)

    @property
    def checkpoint(self) -> Checkpoint:
        return self.model.to_checkpoint()


def mean_loss(lm, mapper, records, vocab, batch_size: int = 64) -> float:
    total = 0.0
    with nx.no_grad():
        for start in range(0, len(records), batch_size):
            batch = records[start: start + batch_size]
            total += loss_step(lm, mapper, batch, vocab).item() * len(batch)
    return total / len(records)


def train(splits: SplitSet, lm: LanguageModel, mapper: MappingNetwork, vocab: Vocabulary,
          config: TrainConfig = TrainConfig()) -> TrainResult:
    """Train in place; ``lm`` and ``mapper`` hold the final parameters afterwards."""
    if not splits.train:
        raise ValueError("training split is empty")
    store = ParameterStore.union(lm.store, mapper.store)
    store.freeze(freeze_mask(config.mode))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    records = splits.train
    log = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(records)) if config.shuffle else np.arange(len(records))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [records[i] for i in order[start: start + config.batch_size]]
            loss = loss_step(lm, mapper, batch, vocab)
            loss.backward()
            nx.adam_step(store, config.adam)
            total += loss.item() * len(batch)
        train_loss = total / len(records)
        val_loss = mean_loss(lm, mapper, splits.val, vocab) if splits.val else None
        log.append(EpochMetrics(epoch, train_loss, val_loss))
        logger.info("epoch %d train %.4f val %s", epoch, train_loss,
                    "-" if val_loss is None else f"{val_loss:.4f}")
    return TrainResult(ReportModel(lm, mapper, vocab, config), log)


def write_metrics_csv(log: Sequence[EpochMetrics], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in log:
            writer.writerow([row.epoch, repr(row.train_loss), "" if row.val_loss is None else repr(row.val_loss)])


def read_metrics_csv(path) -> list[EpochMetrics]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            EpochMetrics(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]) if r["val_loss"] else None)
            for r in csv.DictReader(fh)
        ]
