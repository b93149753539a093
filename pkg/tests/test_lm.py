import math

import numpy as np
import pytest

from medprefix import numerics as nx
from medprefix.corpus import encode
from medprefix.exceptions import ConfigError, LengthError
from medprefix.lm import LMConfig, lm_forward, lm_init, lm_loss, lm_manifest, lm_param_count, lm_pretrain


def small_config(**kw):
    return LMConfig(**{"vocab_size": 20, "d_model": 16, "n_layers": 2, "n_heads": 2, "max_seq": 24, **kw})


class TestInit:
    def test_deterministic(self):
        a, b = lm_init(small_config(), seed=3), lm_init(small_config(), seed=3)
        assert all(a.store[n].data.tobytes() == b.store[n].data.tobytes() for n in a.store)

    def test_bad_heads(self):
        with pytest.raises(ConfigError):
            lm_init(LMConfig(vocab_size=10, d_model=64, n_heads=5))

    @pytest.mark.parametrize("cfg", [small_config(), LMConfig(vocab_size=17), LMConfig(vocab_size=50, d_model=768,
                                                                                        n_layers=0, n_heads=12)])
    def test_count_matches_enumeration(self, cfg):
        lm = lm_init(cfg) if cfg.d_model < 768 else None
        enumerated = sum(int(np.prod(s)) for _, s in lm_manifest(cfg))
        assert lm_param_count(cfg) == enumerated
        if lm is not None:
            assert lm.store.count() == enumerated

    def test_names_prefixed(self):
        assert all(n.startswith("lm.") for n in lm_init(small_config()).store)

    def test_init_statistics(self):
        lm = lm_init(LMConfig(vocab_size=100), seed=0)
        w = lm.store["lm.block0.mlp.w1"].data
        assert abs(w.std() - 0.02) < 1e-3
        assert not lm.store["lm.block0.attn.bq"].data.any()


class TestForward:
    def test_shape_without_prefix(self):
        lm = lm_init(small_config())
        assert lm_forward(lm, None, [1, 5, 6, 2]).shape == (4, 20)

    def test_shape_with_prefix(self):
        lm = lm_init(small_config())
        prefix = nx.Tensor(np.zeros((3, 16), dtype=np.float32))
        assert lm_forward(lm, prefix, [1, 5]).shape == (5, 20)

    def test_overflow(self):
        lm = lm_init(small_config(max_seq=4))
        with pytest.raises(LengthError):
            lm_forward(lm, None, [1, 2, 3, 4, 5])

    def test_causal_mask(self, rng):
        lm = lm_init(small_config(), seed=5)
        for _ in range(20):
            t = int(rng.integers(2, 12))
            ids = rng.integers(0, 20, size=t)
            j = int(rng.integers(1, t))
            changed = ids.copy()
            changed[j] = (changed[j] + 1 + rng.integers(0, 18)) % 20
            a = lm_forward(lm, None, ids).data
            b = lm_forward(lm, None, changed).data
            assert a[:j].tobytes() == b[:j].tobytes()

    def test_attention_rows_are_distributions(self):
        lm = lm_init(small_config(), seed=5)
        record = []
        lm.forward(nx.Tensor(np.ones((1, 2, 16), dtype=np.float32)), np.array([[1, 4, 5, 2]]), attention=record)
        assert len(record) == 2
        for w in record:
            np.testing.assert_allclose(w.sum(axis=-1), 1, atol=1e-6)

    def test_untrained_loss_near_uniform(self):
        cfg = LMConfig(vocab_size=40)
        lm = lm_init(cfg, seed=0)
        loss = lm_loss(lm, [[1, 7, 9, 12, 30, 2], [1, 5, 2]]).item()
        assert abs(loss - math.log(40)) < 0.05 * math.log(40)

    def test_prefix_influence(self, rng):
        lm = lm_init(small_config(), seed=2)
        ids = [1, 5, 6]
        differ = 0
        for _ in range(100):
            a = nx.Tensor(rng.normal(size=(2, 16)).astype(np.float32))
            b = nx.Tensor(rng.normal(size=(2, 16)).astype(np.float32))
            differ += not np.array_equal(lm_forward(lm, a, ids).data[2], lm_forward(lm, b, ids).data[2])
        assert differ >= 99

    def test_grad_check(self):
        lm = lm_init(small_config(n_layers=1), seed=4)
        seqs = [[1, 4, 7, 9, 2], [1, 3, 2]]
        err = nx.grad_check(lambda: lm_loss(lm, seqs), lm.store, probe_count=150, seed=0)
        assert err < 1e-4


class TestPretrain:
    reports = ["findings consistent with edema .", "findings consistent with effusion and edema ."]

    def vocab(self):
        from medprefix.corpus import build_vocab
        return build_vocab(self.reports)

    def test_zero_epochs_is_init(self):
        vocab = self.vocab()
        cfg = LMConfig(vocab_size=len(vocab), d_model=16, n_layers=1, n_heads=2, max_seq=16)
        init = lm_init(cfg, seed=7)
        res = lm_pretrain(self.reports, vocab, cfg, epochs=0, seed=7)
        assert res.log == []
        assert all(init.store[n].data.tobytes() == res.lm.store[n].data.tobytes() for n in init.store)

    def test_one_step_lowers_loss(self):
        vocab = self.vocab()
        cfg = LMConfig(vocab_size=len(vocab), d_model=16, n_layers=1, n_heads=2, max_seq=16)
        seq = [encode(self.reports[0], vocab)]
        before = lm_loss(lm_init(cfg, seed=1), seq).item()
        res = lm_pretrain(self.reports[:1], vocab, cfg, epochs=1, seed=1)
        assert lm_loss(res.lm, seq).item() < before

    def test_loss_decreases_and_deterministic(self):
        vocab = self.vocab()
        cfg = LMConfig(vocab_size=len(vocab), d_model=16, n_layers=1, n_heads=2, max_seq=16)
        a = lm_pretrain(self.reports * 4, vocab, cfg, epochs=5, seed=3, batch_size=4)
        b = lm_pretrain(self.reports * 4, vocab, cfg, epochs=5, seed=3, batch_size=4)
        assert a.log[-1][1] < a.log[0][1]
        assert a.log == b.log

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            lm_pretrain([], self.vocab(), LMConfig(vocab_size=10), epochs=1)
