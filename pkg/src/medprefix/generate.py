"""Greedy and beam-search report generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .corpus import BOS, EOS, Vocabulary, decode
from .exceptions import DimensionError, LengthError
from .lm import LanguageModel
from .mapper import MappingNetwork


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"  # "greedy" or "beam"
    beam_width: int = 4
    max_len: int = 64

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ValueError(f"unknown decoding strategy {self.strategy!r}")
        if self.beam_width < 1 or self.max_len < 1:
            raise ValueError("beam_width and max_len must be >= 1")


def _check(lm: LanguageModel, mapper: MappingNetwork, embeddings: np.ndarray, max_len: int) -> np.ndarray:
    e = np.asarray(embeddings, dtype=nx.DTYPE)
    if e.ndim == 1:
        e = e[None, :]
    if e.ndim != 2 or e.shape[1] != mapper.config.clip_dim:
        raise DimensionError(f"embedding has shape {e.shape[1:]}, expected ({mapper.config.clip_dim},)")
    needed = mapper.config.prefix_length + 1 + max_len
    if needed > lm.config.max_seq:
        raise LengthError(f"prefix + BOS + max_len = {needed} exceeds max_seq={lm.config.max_seq}")
    return e


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_ids(lm: LanguageModel, mapper: MappingNetwork, embeddings, max_len: int = 64) -> list[list[int]]:
    """Greedy token ids (EOS excluded) for a batch of embeddings [B, clip_dim].

    Argmax ties go to the lowest token id. Rows decode independently: the
    batch shares forward passes but finished rows are simply ignored.
    """
    e = _check(lm, mapper, embeddings, max_len)
    batch = e.shape[0]
    with nx.no_grad():
        prefix = mapper.forward(e)
        ids = np.full((batch, 1), BOS, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        out: list[list[int]] = [[] for _ in range(batch)]
        for _ in range(max_len):
            logits = lm.forward(prefix, ids).data[:, -1, :]
            nxt = logits.argmax(axis=-1)
            for b in np.flatnonzero(~done):
                if nxt[b] == EOS:
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]))
            if done.all():
                break
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return out


def greedy_decode(lm: LanguageModel, mapper: MappingNetwork, e, config: DecodeConfig,
                  vocab: Vocabulary) -> str:
    return decode(greedy_ids(lm, mapper, e, config.max_len)[0], vocab)


def sequence_score(lm: LanguageModel, mapper: MappingNetwork, e, generated: list[int]) -> float:
    """Length-normalised log-probability of ``generated`` (which may end in EOS)."""
    if not generated:
        raise ValueError("cannot score an empty continuation")
    emb = _check(lm, mapper, e, len(generated))
    with nx.no_grad():
        prefix = mapper.forward(emb)
        ids = np.array([[BOS] + list(generated[:-1])], dtype=np.int64)
        logp = _log_softmax(lm.forward(prefix, ids).data[0, mapper.config.prefix_length:])
    return float(logp[np.arange(len(generated)), generated].sum() / len(generated))


def beam_ids(lm: LanguageModel, mapper: MappingNetwork, e, width: int = 4, max_len: int = 64) -> list[int]:
    """Beam search; returns the generated ids including a final EOS if one was produced.

    Hypotheses are ranked by summed log-probability divided by the number of
    generated tokens. At each step the ``width`` best extensions survive;
    those ending in EOS retire. The answer is the best of the retired
    hypotheses and those still live when ``max_len`` is reached, ties broken
    by the lexicographically smallest id sequence.
    """
    emb = _check(lm, mapper, e, max_len)
    with nx.no_grad():
        prefix1 = mapper.forward(emb)
        live: list[tuple[float, list[int]]] = [(0.0, [])]
        finished: list[tuple[float, list[int]]] = []
        for step in range(max_len):
            ids = np.array([[BOS] + seq for _, seq in live], dtype=np.int64)
            prefix = nx.Tensor(np.repeat(prefix1.data, len(live), axis=0))
            logp = _log_softmax(lm.forward(prefix, ids).data[:, -1, :])
            candidates = []
            for (total, seq), row in zip(live, logp):
                for tok in range(row.shape[0]):
                    new_total = total + float(row[tok])
                    candidates.append((-new_total / (step + 1), seq + [tok], new_total))
            candidates.sort(key=lambda c: (c[0], c[1]))
            live = []
            for neg_norm, seq, total in candidates[:width]:
                if seq[-1] == EOS:
                    finished.append((total, seq))
                else:
                    live.append((total, seq))
            if not live:
                break
        pool = finished + live
    best = min(pool, key=lambda h: (-h[0] / len(h[1]), h[1]))
    return best[1]


def beam_decode(lm: LanguageModel, mapper: MappingNetwork, e, config: DecodeConfig,
                vocab: Vocabulary) -> str:
    return decode(beam_ids(lm, mapper, e, config.beam_width, config.max_len), vocab)


def generate_reports(lm: LanguageModel, mapper: MappingNetwork, vocab: Vocabulary, embeddings,
                     config: DecodeConfig = DecodeConfig(), batch_size: int = 64) -> list[str]:
    e = np.asarray(embeddings, dtype=nx.DTYPE)
    if e.ndim == 1:
        e = e[None, :]
    if config.strategy == "beam":
        return [beam_decode(lm, mapper, row, config, vocab) for row in e]
    out = []
    for start in range(0, e.shape[0], batch_size):
        out += [decode(ids, vocab) for ids in greedy_ids(lm, mapper, e[start: start + batch_size], config.max_len)]
    return out
