import numpy as np
import pytest

from medprefix.corpus import build_vocab
from medprefix.lm import LMConfig, lm_init
from medprefix.mapper import MapperConfig, mapper_init
from medprefix.synth import SynthConfig, gen_basis, gen_split


@pytest.fixture(scope="session")
def tiny_data():
    """A small synthetic dataset with 32-d embeddings."""
    basis = gen_basis(0, 8, 32)
    splits = gen_split(48, 8, 8, SynthConfig(basis), seed=0)
    vocab = build_vocab([r.report for r in splits.train])
    return splits, vocab


@pytest.fixture
def tiny_models(tiny_data):
    _, vocab = tiny_data
    lm = lm_init(LMConfig(vocab_size=len(vocab), d_model=32, n_layers=1, n_heads=2, max_seq=32), seed=1)
    mapper = mapper_init(
        MapperConfig(clip_dim=32, d_model=32, clip_length=2, prefix_length=3, n_layers=1, n_heads=2), seed=2
    )
    return lm, mapper


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_line(request):
    """Record a one-line pass/fail verdict for an acceptance criterion."""

    def record(number: int, ok: bool, text: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}"
        request.config.stash.setdefault(_ACCEPTANCE, []).append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
