"""Synthetic (embedding, report) pairs with a known, decodable structure.

Each finding owns a fixed random unit vector. A sample's embedding is the
normalised sum of its findings' vectors plus isotropic Gaussian noise, and
its report names the findings with a fixed template. Randomness comes from
numpy's PCG64 generator seeded through ``SeedSequence``, so every dataset is
a pure function of its seeds.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .corpus import EmbeddingRecord, SplitSet
from .exceptions import DegenerateBasisError, InvalidSampleError

FINDING_NAMES = (
    "cardiomegaly",
    "edema",
    "consolidation",
    "atelectasis",
    "effusion",
    "pneumothorax",
    "fracture",
    "opacity",
)
MAX_ABS_COSINE = 0.99
MAX_RETRIES = 100


@dataclass(frozen=True, eq=False)
class FindingBasis:
    seed: int
    names: tuple[str, ...]
    vectors: np.ndarray = field(repr=False)  # [K, clip_dim], float64, unit rows

    @property
    def k(self) -> int:
        return len(self.names)

    @property
    def clip_dim(self) -> int:
        return self.vectors.shape[1]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def nearest(self, embedding: np.ndarray) -> int:
        """Index of the basis vector with the largest cosine similarity."""
        e = np.asarray(embedding, dtype=np.float64)
        return int(np.argmax(self.vectors @ (e / np.linalg.norm(e))))


@dataclass(frozen=True)
class SynthConfig:
    basis: FindingBasis
    noise_sigma: float = 0.05
    max_findings_per_sample: int = 3

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 1 <= self.max_findings_per_sample <= self.basis.k:
            raise ValueError(f"max_findings_per_sample must lie in [1, {self.basis.k}]")


def gen_basis(seed: int, k: int = 8, clip_dim: int = 512) -> FindingBasis:
    """``k`` seeded unit vectors in ``clip_dim`` dimensions, pairwise |cos| < 0.99."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(FINDING_NAMES):
        names = FINDING_NAMES + tuple(f"finding{i}" for i in range(len(FINDING_NAMES), k))
    else:
        names = FINDING_NAMES[:k]
    rng = np.random.default_rng(np.random.SeedSequence([seed, k, clip_dim]))
    for _ in range(MAX_RETRIES):
        vecs = rng.standard_normal((k, clip_dim))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        cos = np.abs(vecs @ vecs.T)
        np.fill_diagonal(cos, 0.0)
        if cos.max(initial=0.0) < MAX_ABS_COSINE:
            vecs.setflags(write=False)
            return FindingBasis(seed=seed, names=names, vectors=vecs)
    raise DegenerateBasisError(f"no non-collinear basis for k={k}, clip_dim={clip_dim} after {MAX_RETRIES} tries")


def report_for(findings) -> str:
    return "findings consistent with " + " and ".join(findings) + " ."


def synth_record(finding_subset, config: SynthConfig, sample_seed: int,
                 record_id: str | None = None) -> EmbeddingRecord:
    """One sample for the given findings (names or basis indices)."""
    basis = config.basis
    idx = sorted({basis.index(f) if isinstance(f, str) else int(f) for f in finding_subset})
    if not idx:
        raise InvalidSampleError("finding subset is empty")
    if len(idx) > config.max_findings_per_sample:
        raise InvalidSampleError(
            f"{len(idx)} findings exceed max_findings_per_sample={config.max_findings_per_sample}"
        )
    if idx[0] < 0 or idx[-1] >= basis.k:
        raise InvalidSampleError(f"finding index out of range for k={basis.k}")

    vec = basis.vectors[idx].sum(axis=0)
    if config.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([basis.seed, sample_seed]))
        vec = vec + config.noise_sigma * rng.standard_normal(basis.clip_dim)
    if len(idx) > 1 or config.noise_sigma > 0:
        vec = vec / np.linalg.norm(vec)
    return EmbeddingRecord(
        id=record_id if record_id is not None else f"synth-{sample_seed}",
        view="AP" if sample_seed % 2 == 0 else "PA",
        embedding=vec.astype(np.float32),
        report=report_for(basis.names[i] for i in idx),
    )


def finding_subsets(k: int, max_size: int) -> list[tuple[int, ...]]:
    """All non-empty index subsets of size <= max_size, in a fixed order."""
    return [c for size in range(1, max_size + 1) for c in itertools.combinations(range(k), size)]


def gen_split(n_train: int, n_val: int, n_test: int, config: SynthConfig, seed: int) -> SplitSet:
    """Sample finding subsets uniformly from all allowed subsets."""
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split sizes must be >= 0")
    subsets = finding_subsets(config.basis.k, config.max_findings_per_sample)
    out = SplitSet()
    for split_idx, (name, n) in enumerate((("train", n_train), ("val", n_val), ("test", n_test))):
        records = getattr(out, name)
        for i in range(n):
            sample_seed = int(np.random.SeedSequence([seed, split_idx, i]).generate_state(1, np.uint64)[0])
            choice = np.random.default_rng(sample_seed).integers(len(subsets))
            records.append(synth_record(subsets[choice], config, sample_seed, f"synth-{name}-{i + 1:04d}"))
    return out
