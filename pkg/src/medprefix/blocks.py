"""Pre-norm transformer block shared by the language model and the mapper."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import ParameterStore, Tensor

MLP_RATIO = 4
INIT_STD = 0.02


def block_manifest(prefix: str, d_model: int) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of one block's tensors, in initialisation order."""
    hidden = MLP_RATIO * d_model
    out = [(f"{prefix}.ln1.gamma", (d_model,)), (f"{prefix}.ln1.beta", (d_model,))]
    for proj in ("q", "k", "v", "o"):
        out.append((f"{prefix}.attn.w{proj}", (d_model, d_model)))
        out.append((f"{prefix}.attn.b{proj}", (d_model,)))
    out += [
        (f"{prefix}.ln2.gamma", (d_model,)),
        (f"{prefix}.ln2.beta", (d_model,)),
        (f"{prefix}.mlp.w1", (d_model, hidden)),
        (f"{prefix}.mlp.b1", (hidden,)),
        (f"{prefix}.mlp.w2", (hidden, d_model)),
        (f"{prefix}.mlp.b2", (d_model,)),
    ]
    return out


def block_param_count(d_model: int) -> int:
    # 4 attention projections with bias, 2 layer norms, d -> 4d -> d MLP
    return 4 * (d_model * d_model + d_model) + 4 * d_model + 8 * d_model * d_model + 5 * d_model


def init_tensor(store: ParameterStore, name: str, shape, rng: np.random.Generator) -> None:
    """Weights ~ N(0, 0.02); biases and layer-norm shifts zero; layer-norm gains one."""
    if name.endswith(".gamma"):
        data = np.ones(shape, dtype=nx.DTYPE)
    elif len(shape) == 1:
        data = np.zeros(shape, dtype=nx.DTYPE)
    else:
        data = rng.normal(0.0, INIT_STD, size=shape).astype(nx.DTYPE)
    store.add(name, data)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return nx.permute(nx.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return nx.reshape(nx.permute(x, (0, 2, 1, 3)), (b, t, h * dh))


def attention(store: ParameterStore, prefix: str, x: Tensor, n_heads: int, causal: bool,
              record: list | None = None) -> Tensor:
    """Multi-head self-attention over x of shape [batch, seq, d_model]."""
    p = store.entries
    q = split_heads(nx.add(nx.matmul(x, p[f"{prefix}.wq"]), p[f"{prefix}.bq"]), n_heads)
    k = split_heads(nx.add(nx.matmul(x, p[f"{prefix}.wk"]), p[f"{prefix}.bk"]), n_heads)
    v = split_heads(nx.add(nx.matmul(x, p[f"{prefix}.wv"]), p[f"{prefix}.bv"]), n_heads)
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = nx.softmax_rows(scores, causal=causal)
    if record is not None:
        record.append(weights.data)
    out = merge_heads(nx.matmul(weights, v))
    return nx.add(nx.matmul(out, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def block_forward(store: ParameterStore, prefix: str, x: Tensor, n_heads: int, causal: bool,
                  record: list | None = None) -> Tensor:
    p = store.entries
    h = nx.layer_norm(x, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"])
    x = nx.add(x, attention(store, f"{prefix}.attn", h, n_heads, causal, record))
    h = nx.layer_norm(x, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])
    h = nx.gelu(nx.add(nx.matmul(h, p[f"{prefix}.mlp.w1"]), p[f"{prefix}.mlp.b1"]))
    h = nx.add(nx.matmul(h, p[f"{prefix}.mlp.w2"]), p[f"{prefix}.mlp.b2"])
    return nx.add(x, h)
