import itertools

import numpy as np
import pytest

from medprefix.corpus import EOS, decode
from medprefix.exceptions import DimensionError, LengthError
from medprefix.generate import (
    DecodeConfig,
    beam_decode,
    beam_ids,
    generate_reports,
    greedy_decode,
    greedy_ids,
    sequence_score,
)
from medprefix.trainer import TrainConfig, train
from medprefix import numerics as nx


@pytest.fixture(scope="module")
def trained(tiny_data):
    """Fine-tuned tiny model: small but decodes sensible reports."""
    from medprefix.lm import LMConfig, lm_init
    from medprefix.mapper import MapperConfig, mapper_init

    splits, vocab = tiny_data
    lm = lm_init(LMConfig(vocab_size=len(vocab), d_model=32, n_layers=1, n_heads=2, max_seq=40), seed=1)
    mapper = mapper_init(MapperConfig(clip_dim=32, d_model=32, clip_length=2, prefix_length=3,
                                      n_layers=1, n_heads=2), seed=2)
    train(splits, lm, mapper, vocab, TrainConfig(mode="finetune", epochs=60, batch_size=8,
                                                   adam=nx.AdamHyper(lr=3e-3)))
    return lm, mapper, vocab


def test_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(strategy="sample")
    with pytest.raises(ValueError):
        DecodeConfig(max_len=0)
    with pytest.raises(ValueError):
        DecodeConfig(strategy="beam", beam_width=0)


def test_immediate_eos_gives_empty_report(tiny_data, tiny_models):
    splits, vocab = tiny_data
    lm, mapper = tiny_models
    # bias the tied output towards EOS: every position's argmax becomes EOS
    lm.store["lm.ln_f.beta"].data = lm.store["lm.wte"].data[EOS] * 1000
    e = splits.test[0].embedding
    assert greedy_decode(lm, mapper, e, DecodeConfig(max_len=20), vocab) == ""
    assert beam_decode(lm, mapper, e, DecodeConfig("beam", 3, 20), vocab) == ""


def test_max_len_one(tiny_data, tiny_models):
    splits, vocab = tiny_data
    lm, mapper = tiny_models
    text = greedy_decode(lm, mapper, splits.test[0].embedding, DecodeConfig(max_len=1), vocab)
    assert len(text.split()) <= 1
    assert len(beam_ids(lm, mapper, splits.test[0].embedding, width=3, max_len=1)) == 1


def test_repeatable(tiny_data, tiny_models):
    splits, vocab = tiny_data
    lm, mapper = tiny_models
    e = splits.test[1].embedding
    cfg = DecodeConfig(max_len=10)
    assert greedy_decode(lm, mapper, e, cfg, vocab) == greedy_decode(lm, mapper, e, cfg, vocab)
    assert beam_ids(lm, mapper, e, 3, 10) == beam_ids(lm, mapper, e, 3, 10)


def test_batched_greedy_matches_single(trained, tiny_data):
    lm, mapper, vocab = trained
    splits, _ = tiny_data
    E = np.stack([r.embedding for r in splits.test])
    batched = greedy_ids(lm, mapper, E, 20)
    assert batched == [greedy_ids(lm, mapper, e, 20)[0] for e in E]


def test_beam_width_one_is_greedy(trained, tiny_data):
    lm, mapper, vocab = trained
    splits, _ = tiny_data
    for rec in splits.test:
        g = greedy_decode(lm, mapper, rec.embedding, DecodeConfig(max_len=20), vocab)
        b = beam_decode(lm, mapper, rec.embedding, DecodeConfig("beam", 1, 20), vocab)
        assert g == b


def test_beam_scores_at_least_greedy(trained, tiny_data):
    lm, mapper, vocab = trained
    splits, _ = tiny_data
    for rec in splits.test + splits.val:
        greedy = greedy_ids(lm, mapper, rec.embedding, 20)[0]
        if len(greedy) < 20:
            greedy = greedy + [EOS]
        beam = beam_ids(lm, mapper, rec.embedding, 4, 20)
        assert sequence_score(lm, mapper, rec.embedding, beam) >= \
            sequence_score(lm, mapper, rec.embedding, greedy) - 1e-12


def test_distinct_subsets_give_distinct_reports(trained, tiny_data):
    lm, mapper, vocab = trained
    splits, _ = tiny_data
    records = splits.train
    texts = generate_reports(lm, mapper, vocab, [r.embedding for r in records], DecodeConfig(max_len=20))
    pairs = [(a, b) for a, b in itertools.combinations(range(len(records)), 2)
             if records[a].report != records[b].report]
    distinct = sum(texts[a] != texts[b] for a, b in pairs)
    assert distinct >= 0.95 * len(pairs)


def test_decode_strips_reserved(trained, tiny_data):
    lm, mapper, vocab = trained
    text = generate_reports(lm, mapper, vocab, [tiny_data[0].test[0].embedding], DecodeConfig(max_len=20))[0]
    assert not any(tok.startswith("<") for tok in text.split())
    assert decode([1, 0, 3, 2], vocab) == ""


def test_wrong_embedding_length(tiny_data, tiny_models):
    lm, mapper = tiny_models
    with pytest.raises(DimensionError):
        greedy_decode(lm, mapper, np.zeros(31), DecodeConfig(), tiny_data[1])


def test_length_bound(tiny_data, tiny_models):
    lm, mapper = tiny_models
    with pytest.raises(LengthError):
        greedy_decode(lm, mapper, np.zeros(32), DecodeConfig(max_len=29), tiny_data[1])
    greedy_decode(lm, mapper, np.zeros(32), DecodeConfig(max_len=28), tiny_data[1])
