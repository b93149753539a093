"""A small decoder-only transformer language model.

GPT-2 layout: learned positional embeddings, pre-norm blocks with a GELU
MLP, a final layer norm, and an output projection tied to the token
embedding. The model can be conditioned on a prefix of continuous vectors
that are placed in front of the embedded tokens.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .blocks import block_forward, block_manifest, block_param_count, init_tensor
from .corpus import PAD, Vocabulary, encode
from .exceptions import ConfigError, LengthError
from .numerics import AdamHyper, ParameterStore, Tensor

logger = logging.getLogger(__name__)

PREFIX = "lm."


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    d_model: int = 256
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = 128

    def validate(self) -> "LMConfig":
        if min(self.vocab_size, self.d_model, self.n_heads, self.max_seq) < 1 or self.n_layers < 0:
            raise ConfigError(f"LMConfig extents must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def lm_manifest(config: LMConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = config.d_model
    out = [("lm.wte", (config.vocab_size, d)), ("lm.wpe", (config.max_seq, d))]
    for i in range(config.n_layers):
        out += block_manifest(f"lm.block{i}", d)
    out += [("lm.ln_f.gamma", (d,)), ("lm.ln_f.beta", (d,))]
    return out


def lm_param_count(config: LMConfig) -> int:
    d = config.d_model
    return (config.vocab_size + config.max_seq) * d + config.n_layers * block_param_count(d) + 2 * d


class LanguageModel:
    """Parameters (under ``lm.``) plus the forward pass."""

    def __init__(self, config: LMConfig, store: ParameterStore):
        self.config = config.validate()
        self.store = store

    def copy(self) -> "LanguageModel":
        store = ParameterStore()
        for name, t in self.store.entries.items():
            store.add(name, t.data.copy())
        store.freeze(self.store.frozen)
        return LanguageModel(self.config, store)

    def forward(self, prefix: Tensor | None, token_ids, attention: list | None = None,
                offsets=None) -> Tensor:
        """Logits [batch, p + t, vocab] for prefix [batch, p, d] and ids [batch, t].

        ``offsets`` ([batch] ints) shifts each row's position ids; pretraining
        uses it so the model does not tie the template to absolute positions.
        Passing a list as ``attention`` collects each layer's attention weights.
        """
        cfg = self.config
        p = self.store.entries
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError(f"token_ids must be [batch, t], got shape {ids.shape}")
        x = nx.embedding(p["lm.wte"], ids)
        if prefix is not None and prefix.shape[1] > 0:
            if prefix.ndim != 3 or prefix.shape[0] != ids.shape[0] or prefix.shape[2] != cfg.d_model:
                raise ValueError(f"prefix shape {prefix.shape} incompatible with ids {ids.shape}")
            x = nx.concat([prefix, x], axis=1)
        length = x.shape[1]
        positions = np.arange(length)
        if offsets is not None:
            positions = np.asarray(offsets, dtype=np.int64)[:, None] + positions
        if positions.max() >= cfg.max_seq:
            raise LengthError(f"sequence of {int(positions.max()) + 1} positions exceeds max_seq={cfg.max_seq}")
        x = nx.add(x, nx.embedding(p["lm.wpe"], positions))
        for i in range(cfg.n_layers):
            x = block_forward(self.store, f"lm.block{i}", x, cfg.n_heads, causal=True, record=attention)
        x = nx.layer_norm(x, p["lm.ln_f.gamma"], p["lm.ln_f.beta"])
        return nx.matmul(x, nx.transpose(p["lm.wte"]))

    __call__ = forward


def lm_init(config: LMConfig, seed: int = 0, store: ParameterStore | None = None) -> LanguageModel:
    config.validate()
    store = ParameterStore() if store is None else store
    rng = np.random.default_rng(seed)
    for name, shape in lm_manifest(config):
        init_tensor(store, name, shape, rng)
    return LanguageModel(config, store)


def lm_forward(lm: LanguageModel, prefix: Tensor | None, token_ids) -> Tensor:
    """Unbatched forward: prefix [p, d] (or None), ids [t] -> logits [p + t, vocab]."""
    ids = np.asarray(token_ids, dtype=np.int64)[None, :]
    if prefix is not None:
        prefix = nx.reshape(prefix, (1,) + prefix.shape)
    logits = lm.forward(prefix, ids)
    return nx.reshape(logits, logits.shape[1:])


# ---------------------------------------------------------------------------
# batching helpers shared with the trainer


def pad_batch(sequences: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists with PAD; returns (ids [B, T], lengths [B])."""
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    ids = np.full((len(sequences), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
    return ids, lengths


def next_token_targets(ids: np.ndarray, lengths: np.ndarray, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Targets and mask over ``offset + T`` positions.

    Position ``offset + k`` predicts token ``k + 1`` for ``k < length - 1``;
    every other position (prefix, the final EOS, padding) is masked out.
    """
    b, t = ids.shape
    targets = np.zeros((b, offset + t), dtype=np.int64)
    mask = np.zeros((b, offset + t), dtype=bool)
    targets[:, offset: offset + t - 1] = ids[:, 1:]
    k = np.arange(t - 1)
    mask[:, offset: offset + t - 1] = k[None, :] < (lengths[:, None] - 1)
    return targets, mask


def lm_loss(lm: LanguageModel, sequences: list[list[int]], offsets=None) -> Tensor:
    ids, lengths = pad_batch(sequences)
    targets, mask = next_token_targets(ids, lengths)
    return nx.cross_entropy(lm.forward(None, ids, offsets=offsets), targets, mask)


@dataclass
class PretrainResult:
    lm: LanguageModel
    log: list[tuple[int, float]] = field(default_factory=list)


def lm_pretrain(
    reports: list[str],
    vocab: Vocabulary,
    config: LMConfig,
    epochs: int = 10,
    seed: int = 0,
    batch_size: int = 16,
    adam: AdamHyper = AdamHyper(),
    lm: LanguageModel | None = None,
    max_offset: int = 64,
) -> PretrainResult:
    """Next-token training of every ``lm.`` parameter on report text (no prefix).

    Each sequence starts at a random position in ``[0, max_offset]`` (capped
    so it still fits), so later prefix conditioning does not move the text
    onto positions the model has never seen. ``max_offset=0`` disables this.
    Returns the model and a per-epoch log of mean training loss.
    """
    if not reports:
        raise ValueError("pretraining corpus is empty")
    if lm is None:
        lm = lm_init(config, seed)
    sequences = [encode(r, vocab) for r in reports]
    too_long = [i for i, s in enumerate(sequences) if len(s) > config.max_seq]
    if too_long:
        raise LengthError(f"report {too_long[0]} does not fit in max_seq={config.max_seq}")
    store = lm.store
    store.freeze(())
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    log = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(sequences))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = [sequences[i] for i in order[start: start + batch_size]]
            offsets = None
            if max_offset:
                width = max(len(s) for s in batch)
                offsets = rng.integers(0, min(max_offset, config.max_seq - width) + 1, size=len(batch))
            loss = lm_loss(lm, batch, offsets)
            loss.backward()
            nx.adam_step(store, adam)
            total += loss.item() * len(batch)
        log.append((epoch, total / len(sequences)))
        logger.info("pretrain epoch %d loss %.4f", epoch, log[-1][1])
    return PretrainResult(lm, log)
