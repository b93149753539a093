"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations in this module build a
graph of tensors when gradients are enabled; calling ``backward`` on a
scalar result fills ``.grad`` on every leaf tensor that requires it.

Ops accept leading batch axes where the models need them, but broadcasting
is limited to adding a tensor whose shape is a suffix of the other operand's
shape (a bias vector, or a positional table shared across a batch).

Parameters live in float32. Every op checks its output for NaN/Inf and
raises :class:`NonFiniteError` with a short diagnostic dump.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .exceptions import (
    DeterminismError,
    DimensionError,
    InvalidBatchError,
    NonFiniteError,
    TrainingStateError,
)

logger = logging.getLogger(__name__)

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference, evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor; leaf gradients accumulate in ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _dump_nonfinite(op: str, out: np.ndarray, inputs: Sequence[Tensor]) -> str:
    bad = int(np.size(out) - np.count_nonzero(np.isfinite(out)))
    lines = [f"non-finite output from {op}: {bad} of {out.size} values, shape {out.shape}"]
    for i, t in enumerate(inputs):
        d = t.data
        finite = d[np.isfinite(d)]
        lo = float(finite.min()) if finite.size else float("nan")
        hi = float(finite.max()) if finite.size else float("nan")
        lines.append(f"  input {i}: shape {d.shape} dtype {d.dtype} finite-range [{lo:.4g}, {hi:.4g}]")
    return "\n".join(lines)


def _result(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.isfinite(out).all():
        msg = _dump_nonfinite(op, out, parents)
        logger.error(msg)
        raise NonFiniteError(msg)
    t = Tensor(out)
    t.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may have a shape equal to a suffix of ``a``'s."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape[a.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add: shape {b.shape} does not broadcast onto {a.shape}")
    b_shape = b.shape

    def backward(g):
        return g, _sum_to_shape(g, b_shape)

    return _result("add", a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        return g * b.data, g * a.data

    return _result("mul", a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return _result("scale", x.data * x.data.dtype.type(c), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(x.data.sum()), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _result("reshape", x.data.reshape(shape), (x,), backward)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _result("permute", np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} along axis {axis}: {exc}") from None
    return _result("concat", out, tuple(tensors), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape
    dtype = x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result("slice", np.ascontiguousarray(x.data[index]), (x,), backward)


def expand(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``x`` along a new leading axis."""

    def backward(g):
        return (g.sum(axis=0),)

    return _result("expand", np.broadcast_to(x.data, (n,) + x.shape).copy(), (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` ([n, d]) at integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise DimensionError(f"embedding: ids outside [0, {n}) for table of shape {table.shape}")
    shape = table.shape
    dtype = table.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result("embedding", table.data[ids], (table,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D matrix shared across ``a``'s leading axes, or has
    exactly the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ for shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if shared:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    if shared:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data
    return _result("matmul", out, (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (the GPT-2 variant)."""
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(0.044715)
    inner = c * (d + k * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1 + t)

    def backward(g):
        dinner = c * (1 + 3 * k * d * d)
        return (g * (0.5 * (1 + t) + 0.5 * d * (1 - t * t) * dinner),)

    return _result("gelu", out, (x,), backward)


def _causal_allowed(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def softmax_rows(x: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    With ``causal=True`` the last two axes must be square and entry (i, j)
    with j > i is forced to probability exactly zero; masked entries do not
    take part in the max either, so they cannot influence the result.
    """
    d = x.data
    if causal:
        if d.shape[-1] != d.shape[-2]:
            raise DimensionError(f"causal softmax needs square trailing axes, got {d.shape}")
        allowed = _causal_allowed(d.shape[-1])
        d = np.where(allowed, d, -np.inf)
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result("softmax", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit (population) variance, then scale and shift."""
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input {x.shape}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    centered = d - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1 / np.sqrt(var + d.dtype.type(eps))
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layer_norm", out, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Masked mean negative log-likelihood of ``targets``.

    ``logits`` is [t, V] or [..., t, V]. For a single sequence the result is
    the mean over masked-in positions. With leading axes, each sequence is
    averaged on its own and the per-sequence losses are then averaged, so
    every sequence weighs the same regardless of its length.
    """
    z = logits.data
    vocab = z.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != z.shape[:-1] or mask.shape != z.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: logits {z.shape} vs targets {targets.shape} / mask {mask.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise DimensionError(f"cross_entropy: target ids outside [0, {vocab})")

    z2 = z.reshape(-1, z.shape[-2], vocab)
    t2 = targets.reshape(z2.shape[:2])
    m2 = mask.reshape(z2.shape[:2])
    counts = m2.sum(axis=1)
    if (counts == 0).any():
        raise InvalidBatchError("cross_entropy: a sequence has no masked-in positions")

    shifted = z2 - z2.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, t2[..., None], axis=-1)[..., 0]
    nll = logsumexp - picked
    weights = (m2 / counts[:, None] / z2.shape[0]).astype(z.dtype)
    per_seq = np.where(m2, nll, 0).sum(axis=1) / counts.astype(z.dtype)
    loss = np.asarray(per_seq.mean(), dtype=z.dtype)

    def backward(g):
        probs = np.exp(shifted - logsumexp[..., None])
        np.put_along_axis(probs, t2[..., None], np.take_along_axis(probs, t2[..., None], -1) - 1, -1)
        return ((probs * (weights * g)[..., None]).reshape(z.shape),)

    return _result("cross_entropy", loss, (logits,), backward)


# ---------------------------------------------------------------------------
# parameters and optimisation


class ParameterStore:
    """Named parameter tensors plus freeze flags and Adam state.

    ``frozen`` holds name prefixes; a parameter whose name starts with any of
    them is excluded from gradient computation and from updates.
    """

    def __init__(self):
        self.entries: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        self.adam_state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step = 0

    @classmethod
    def union(cls, *stores: "ParameterStore") -> "ParameterStore":
        """A store over the same tensor objects as ``stores`` (no copies)."""
        merged = cls()
        for s in stores:
            for name, t in s.entries.items():
                if name in merged.entries:
                    raise KeyError(f"duplicate parameter {name!r}")
                merged.entries[name] = t
        merged.freeze(set().union(*(s.frozen for s in stores)))
        return merged

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.ascontiguousarray(data, dtype=DTYPE), requires_grad=not self.is_frozen(name))
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def is_frozen(self, name: str) -> bool:
        return any(name.startswith(p) for p in self.frozen)

    def freeze(self, prefixes: Iterable[str]) -> None:
        """Replace the frozen prefix set and update ``requires_grad`` flags."""
        self.frozen = set(prefixes)
        for name, t in self.entries.items():
            t.requires_grad = not self.is_frozen(name)
            if not t.requires_grad:
                t.grad = None
                self.adam_state.pop(name, None)

    def trainable_names(self) -> list[str]:
        return [n for n in self.entries if not self.is_frozen(n)]

    def count(self, trainable_only: bool = False) -> int:
        names = self.trainable_names() if trainable_only else self.entries
        return int(sum(self.entries[n].data.size for n in names))

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.entries.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            t = self.entries[name]
            if t.shape != arr.shape:
                raise DimensionError(f"{name}: shape {arr.shape} does not match {t.shape}")
            t.data = np.array(arr, dtype=DTYPE)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0 or not self.eps > 0:
            raise ValueError("lr and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


def adam_step(store: ParameterStore, hyper: AdamHyper = AdamHyper()) -> ParameterStore:
    """One bias-corrected Adam update of every non-frozen parameter.

    Frozen parameters are never touched. All gradients are cleared afterwards.
    """
    trainable = store.trainable_names()
    missing = [n for n in trainable if store.entries[n].grad is None]
    if missing:
        raise TrainingStateError(f"no gradient for trainable parameter(s): {', '.join(missing[:5])}")

    store.step += 1
    t = store.step
    b1, b2 = DTYPE(hyper.beta1), DTYPE(hyper.beta2)
    corr1 = DTYPE(1 - hyper.beta1**t)
    corr2 = DTYPE(1 - hyper.beta2**t)
    lr, eps = DTYPE(hyper.lr), DTYPE(hyper.eps)
    for name in trainable:
        p = store.entries[name]
        g = p.grad.astype(DTYPE, copy=False)
        if name not in store.adam_state:
            store.adam_state[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = store.adam_state[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
        if not np.isfinite(update).all():
            raise NonFiniteError(f"adam_step: non-finite update for {name}")
        p.data -= update
    store.zero_grad()
    return store


def grad_check(
    loss_fn: Callable[[], Tensor],
    store: ParameterStore,
    probe_count: int = 20,
    eps: float = 1e-5,
    seed: int = 0,
    names: Sequence[str] | None = None,
    dtype=np.longdouble,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` takes no arguments and must read its parameters from
    ``store``. Up to ``probe_count`` distinct scalar parameters are drawn
    (tensor uniformly, then element uniformly) from ``names``, defaulting to
    the store's trainable parameters. Returns the worst relative error
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    The check runs on ``dtype`` copies of the parameters, extended precision
    by default. Weights initialised at scale 0.02 make eps=1e-3 far too
    coarse (second-order truncation), and at eps=1e-5 float32 or even
    float64 cancellation swamps gradients near 1e-8. Originals are restored
    on exit.
    """
    originals = {n: t.data for n, t in store.entries.items()}
    candidates = list(names) if names is not None else store.trainable_names()
    if not candidates:
        raise ValueError("grad_check: no parameters to probe")
    try:
        for t in store.entries.values():
            t.data = t.data.astype(dtype)
        store.zero_grad()
        loss = loss_fn()
        base = float(loss.data)
        loss.backward()
        analytic = {n: store.entries[n].grad for n in candidates}
        with no_grad():
            again = float(loss_fn().data)
        if again != base:
            raise DeterminismError(f"loss_fn is not deterministic: {base!r} != {again!r}")

        rng = np.random.default_rng(seed)
        sizes = [store.entries[n].data.size for n in candidates]
        total = sum(sizes)
        wanted = min(probe_count, total)
        probes: list[tuple[str, int]] = []
        chosen: set[tuple[str, int]] = set()
        while len(probes) < wanted:
            which = int(rng.integers(len(candidates)))
            probe = (candidates[which], int(rng.integers(sizes[which])))
            if probe in chosen:
                if len(chosen) >= total:
                    break
                continue
            chosen.add(probe)
            probes.append(probe)

        worst = 0.0
        with no_grad():
            for name, idx in probes:
                flat = store.entries[name].data.reshape(-1)
                keep = flat[idx]
                flat[idx] = keep + eps
                f_plus = loss_fn().data
                flat[idx] = keep - eps
                f_minus = loss_fn().data
                flat[idx] = keep
                numeric = float((f_plus - f_minus) / (2 * eps))
                g = analytic[name]
                a = 0.0 if g is None else float(g.reshape(-1)[idx])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
        return worst
    finally:
        for n, t in store.entries.items():
            t.data = originals[n]
        store.zero_grad()
