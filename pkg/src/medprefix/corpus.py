"""Report text preprocessing, vocabulary, tokenisation and dataset files.

Dataset files are UTF-8 JSONL, one record per line::

    {"id": "...", "view": "AP", "embedding": [...], "report": "...", "split": "train"}

``split`` is optional and defaults to ``"train"``. Vocabulary files hold one
token per line; line ``i`` (0-based) is token id ``i + 4`` because ids 0-3
are reserved for PAD, BOS, EOS and UNK.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import DimensionError, EmptyReportError, InvalidCorpusError, ParseError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
FRONTAL_VIEWS = ("AP", "PA")
SPLITS = ("train", "val", "test")

# MIMIC-CXR after AP/PA filtering; documentation only, never used in computation.
MIMIC_CXR_PAIRS = 243_334
MIMIC_CXR_SPLIT = {"train": 237_972, "val": 1_959, "test": 3_403}

_WHITESPACE = re.compile(r"\s+")
_DISALLOWED = re.compile(r"[^a-z0-9 .]")
_SPACES = re.compile(r" +")


def preprocess_report(raw: str) -> str:
    """Lowercase, drop everything outside ``[a-z0-9 .]`` and squeeze spaces.

    >>> preprocess_report("Findings: No acute disease!!")
    'findings no acute disease'
    """
    text = _WHITESPACE.sub(" ", raw.lower())
    text = _DISALLOWED.sub("", text)
    text = _SPACES.sub(" ", text).strip()
    if not text:
        raise EmptyReportError(f"report is empty after preprocessing: {raw[:40]!r}")
    return text


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    view: str
    embedding: np.ndarray
    report: str

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.view == other.view
            and self.report == other.report
            and self.embedding.shape == other.embedding.shape
            and np.array_equal(self.embedding, other.embedding)
        )

    __hash__ = None


@dataclass
class SplitSet:
    train: list[EmbeddingRecord] = field(default_factory=list)
    val: list[EmbeddingRecord] = field(default_factory=list)
    test: list[EmbeddingRecord] = field(default_factory=list)

    def items(self):
        return [("train", self.train), ("val", self.val), ("test", self.test)]

    def all_records(self) -> list[EmbeddingRecord]:
        return self.train + self.val + self.test


def filter_views(records: Iterable[EmbeddingRecord]) -> list[EmbeddingRecord]:
    """Keep AP/PA records only, first occurrence of each id."""
    seen: set[str] = set()
    kept = []
    for rec in records:
        if rec.view not in FRONTAL_VIEWS or rec.id in seen:
            continue
        seen.add(rec.id)
        kept.append(rec)
    return kept


class Vocabulary:
    """Bijection between whitespace tokens and dense integer ids."""

    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(RESERVED) + list(tokens)
        self.stoi: dict[str, int] = {}
        for i, tok in enumerate(self.itos):
            if tok in self.stoi:
                raise InvalidCorpusError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = i

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __repr__(self):
        return f"Vocabulary(size={len(self)})"

    @property
    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self.itos[len(RESERVED):]

    def encode(self, text: str) -> list[int]:
        return encode(text, self)

    def decode(self, ids: Iterable[int]) -> str:
        return decode(ids, self)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        tokens = text.split("\n")
        if tokens and tokens[-1] == "":
            tokens.pop()
        for i, tok in enumerate(tokens, start=1):
            if not tok or " " in tok:
                raise ParseError(f"invalid vocabulary token {tok!r}", line=i)
        return cls(tokens)


def build_vocab(reports: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Tokens with count >= ``min_freq``, ordered by (count desc, token asc)."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter()
    n_reports = 0
    for report in reports:
        n_reports += 1
        counts.update(report.split())
    if not n_reports or not counts:
        raise InvalidCorpusError("cannot build a vocabulary from an empty corpus")
    kept = [tok for tok, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(kept)


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return [BOS] + [vocab.stoi.get(tok, UNK) for tok in text.split()] + [EOS]


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.itos[i] for i in ids if i >= len(RESERVED))


# ---------------------------------------------------------------------------
# dataset files


def _float_list(vec: np.ndarray) -> list[float]:
    # shortest decimal that round-trips to the same float32
    return [float(np.format_float_positional(x, unique=True, trim="-")) for x in vec.astype(np.float32)]


def record_to_json(rec: EmbeddingRecord, split: str | None = None) -> str:
    obj = {"id": rec.id, "view": rec.view, "embedding": _float_list(rec.embedding), "report": rec.report}
    if split is not None:
        obj["split"] = split
    return json.dumps(obj)


def parse_record(line: str, lineno: int, clip_dim: int | None = None,
                 require_report: bool = True) -> tuple[EmbeddingRecord, str]:
    """Parse one JSONL line into ``(record, split)``."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object", line=lineno)
    try:
        rec_id = obj["id"]
        embedding = obj["embedding"]
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}", line=lineno) from None
    view = obj.get("view", "AP" if not require_report else None)
    report = obj.get("report")
    split = obj.get("split", "train")
    if not isinstance(rec_id, str) or not isinstance(view, str):
        raise ParseError("'id' and 'view' must be strings", line=lineno)
    if split not in SPLITS:
        raise ParseError(f"unknown split {split!r}", line=lineno)
    if not isinstance(embedding, list) or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in embedding
    ):
        raise ParseError("'embedding' must be a list of numbers", line=lineno)
    if clip_dim is not None and len(embedding) != clip_dim:
        raise DimensionError(
            f"line {lineno}: embedding of record {rec_id!r} has length {len(embedding)}, expected {clip_dim}"
        )
    vec = np.asarray(embedding, dtype=np.float32)
    if not np.isfinite(vec).all():
        raise ParseError("embedding contains non-finite values", line=lineno)
    if report is None:
        if require_report:
            raise ParseError("missing field 'report'", line=lineno)
        text = ""
    elif not isinstance(report, str):
        raise ParseError("'report' must be a string", line=lineno)
    else:
        try:
            text = preprocess_report(report)
        except EmptyReportError as exc:
            raise ParseError(str(exc), line=lineno) from None
    return EmbeddingRecord(rec_id, view, vec, text), split


def load_dataset(path, clip_dim: int | None = None) -> SplitSet:
    """Read a JSONL dataset; reports are preprocessed and views filtered.

    When ``clip_dim`` is None the first record fixes the expected length.
    """
    buckets: dict[str, list[EmbeddingRecord]] = {s: [] for s in SPLITS}
    ordered = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec, split = parse_record(line, lineno, clip_dim)
            if clip_dim is None:
                clip_dim = rec.embedding.shape[0]
            ordered.append((rec, split))
    kept = {id(r) for r in filter_views(r for r, _ in ordered)}
    for rec, split in ordered:
        if id(rec) in kept:
            buckets[split].append(rec)
    return SplitSet(**buckets)


def save_dataset(splits: SplitSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, records in splits.items():
            for rec in records:
                fh.write(record_to_json(rec, name) + "\n")
