"""Corpus-level BLEU with a single reference per hypothesis and no smoothing."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .corpus import EmbeddingRecord, preprocess_report
from .exceptions import EmptyReportError, InvalidInputError


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    if n < 1:
        raise ValueError("n must be >= 1")
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuReport:
    precisions: tuple[float, ...]
    brevity_penalty: float
    bleu: tuple[float, ...]
    hyp_len: int
    ref_len: int

    @property
    def bleu1(self):
        return self.bleu[0]

    @property
    def bleu2(self):
        return self.bleu[1]

    @property
    def bleu3(self):
        return self.bleu[2]

    @property
    def bleu4(self):
        return self.bleu[3]

    def as_rows(self) -> list[tuple[str, float | int]]:
        rows = [(f"bleu{n}", b) for n, b in enumerate(self.bleu, start=1)]
        return rows + [("bp", self.brevity_penalty), ("hyp_len", self.hyp_len), ("ref_len", self.ref_len)]

    def percent(self) -> tuple[float, ...]:
        """Scores x100 rounded to one decimal, the way result tables print them (34.2)."""
        return tuple(round(100 * b, 1) for b in self.bleu)


def corpus_bleu(pairs: Iterable[tuple[str | Sequence[str], str | Sequence[str]]], max_n: int = 4) -> BleuReport:
    """BLEU-1..max_n over ``(hypothesis, reference)`` pairs.

    Strings are split on whitespace. Clipped n-gram matches and candidate
    n-gram totals are summed over the whole corpus before dividing; the
    brevity penalty uses total lengths. An order with zero matches zeroes
    every BLEU score from that order up.
    """
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    n_pairs = 0
    for hyp, ref in pairs:
        n_pairs += 1
        h = hyp.split() if isinstance(hyp, str) else list(hyp)
        r = ref.split() if isinstance(ref, str) else list(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc = ngram_counts(h, n)
            rc = ngram_counts(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if not n_pairs:
        raise InvalidInputError("corpus_bleu needs at least one pair")

    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        return BleuReport(precisions, 0.0, (0.0,) * max_n, 0, ref_len)
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    scores = []
    log_sum = 0.0
    for n in range(1, max_n + 1):
        p = precisions[n - 1]
        if p <= 0 or (scores and scores[-1] == 0.0):
            scores.append(0.0)
            log_sum = -math.inf
            continue
        log_sum += math.log(p)
        scores.append(bp * math.exp(log_sum / n))
    return BleuReport(precisions, bp, tuple(scores), hyp_len, ref_len)


def _clean(text: str) -> str:
    try:
        return preprocess_report(text)
    except EmptyReportError:
        return ""


@dataclass(frozen=True)
class RecordOutput:
    id: str
    hypothesis: str
    reference: str


def evaluate_split(model, records: Sequence[EmbeddingRecord], decode_config=None):
    """Decode every record and score the corpus.

    ``model`` is a :class:`~medprefix.trainer.ReportModel`. Returns the
    :class:`BleuReport` and the per-record outputs in record-id order.
    """
    from .generate import DecodeConfig, generate_reports

    if not records:
        raise InvalidInputError("cannot evaluate an empty split")
    decode_config = decode_config or DecodeConfig()
    ordered = sorted(records, key=lambda r: r.id)
    hyps = generate_reports(model.lm, model.mapper, model.vocab, [r.embedding for r in ordered], decode_config)
    outputs = [RecordOutput(r.id, _clean(h), _clean(r.report)) for r, h in zip(ordered, hyps)]
    report = corpus_bleu((o.hypothesis, o.reference) for o in outputs)
    return report, outputs


def write_bleu_csv(report: BleuReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in report.as_rows():
            writer.writerow([name, value if isinstance(value, int) else repr(float(value))])


def write_outputs_jsonl(outputs: Sequence[RecordOutput], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for o in outputs:
            fh.write(json.dumps({"id": o.id, "hypothesis": o.hypothesis, "reference": o.reference}) + "\n")
