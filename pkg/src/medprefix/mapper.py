"""Transformer mapping network from vision embeddings to LM prefix vectors.

The embedding is linearly projected to ``clip_length`` vectors of width
``d_model``. A learned prefix constant of ``prefix_length`` rows is placed
in front of them, the joint sequence goes through bidirectional transformer
blocks, and the outputs at the prefix positions become the language-model
prefix. There are no positional embeddings and no final layer norm.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .blocks import block_forward, block_manifest, block_param_count, init_tensor
from .exceptions import ConfigError, DimensionError
from .numerics import ParameterStore, Tensor

PREFIX = "mapper."


@dataclass(frozen=True)
class MapperConfig:
    clip_dim: int = 512
    d_model: int = 256
    clip_length: int = 4
    prefix_length: int = 8
    n_layers: int = 1
    n_heads: int = 4

    def validate(self) -> "MapperConfig":
        if min(self.clip_dim, self.d_model, self.n_heads, self.clip_length, self.prefix_length) < 1:
            raise ConfigError(f"MapperConfig extents must be positive: {self}")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def mapper_manifest(config: MapperConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = config.d_model
    out = [
        ("mapper.proj.w", (config.clip_dim, config.clip_length * d)),
        ("mapper.proj.b", (config.clip_length * d,)),
        ("mapper.prefix", (config.prefix_length, d)),
    ]
    for i in range(config.n_layers):
        out += block_manifest(f"mapper.block{i}", d)
    return out


def count_params(config: MapperConfig) -> tuple[int, list[tuple[str, tuple[int, ...], int]]]:
    """Closed-form parameter count plus the per-tensor manifest ``(name, shape, size)``.

    >>> count_params(MapperConfig(clip_dim=8, d_model=16, clip_length=2,
    ...                           prefix_length=2, n_layers=1, n_heads=2))[0]
    3600
    """
    config.validate()
    d = config.d_model
    total = (
        config.clip_dim * config.clip_length * d
        + config.clip_length * d
        + config.prefix_length * d
        + config.n_layers * block_param_count(d)
    )
    manifest = [(name, shape, int(np.prod(shape))) for name, shape in mapper_manifest(config)]
    return total, manifest


class MappingNetwork:
    def __init__(self, config: MapperConfig, store: ParameterStore):
        self.config = config.validate()
        self.store = store

    def copy(self) -> "MappingNetwork":
        store = ParameterStore()
        for name, t in self.store.entries.items():
            store.add(name, t.data.copy())
        store.freeze(self.store.frozen)
        return MappingNetwork(self.config, store)

    def forward(self, embeddings) -> Tensor:
        """Prefix [batch, prefix_length, d_model] for embeddings [batch, clip_dim]."""
        cfg = self.config
        p = self.store.entries
        e = embeddings if isinstance(embeddings, Tensor) else Tensor(np.asarray(embeddings, dtype=nx.DTYPE))
        if e.ndim != 2 or e.shape[1] != cfg.clip_dim:
            raise DimensionError(f"expected embeddings of shape [batch, {cfg.clip_dim}], got {e.shape}")
        batch = e.shape[0]
        prefix = nx.expand(p["mapper.prefix"], batch)
        if cfg.n_layers == 0:
            return prefix
        clip = nx.add(nx.matmul(e, p["mapper.proj.w"]), p["mapper.proj.b"])
        clip = nx.reshape(clip, (batch, cfg.clip_length, cfg.d_model))
        x = nx.concat([prefix, clip], axis=1)
        for i in range(cfg.n_layers):
            x = block_forward(self.store, f"mapper.block{i}", x, cfg.n_heads, causal=False)
        return nx.slice_axis(x, 1, 0, cfg.prefix_length)

    __call__ = forward


def mapper_init(config: MapperConfig, seed: int = 0, store: ParameterStore | None = None) -> MappingNetwork:
    config.validate()
    store = ParameterStore() if store is None else store
    rng = np.random.default_rng(seed)
    for name, shape in mapper_manifest(config):
        init_tensor(store, name, shape, rng)
    return MappingNetwork(config, store)


def map_embedding(mapper: MappingNetwork, e) -> Tensor:
    """Prefix [prefix_length, d_model] for a single embedding of length clip_dim."""
    vec = np.asarray(e.data if isinstance(e, Tensor) else e, dtype=nx.DTYPE)
    if vec.shape != (mapper.config.clip_dim,):
        raise DimensionError(f"embedding has shape {vec.shape}, expected ({mapper.config.clip_dim},)")
    out = mapper.forward(vec[None, :])
    return nx.reshape(out, out.shape[1:])
