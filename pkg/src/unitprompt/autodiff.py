"""Small tape-based reverse-mode autodiff over numpy arrays.

Only the operators the unit language model and prompt tuning need are
provided. Operations are recorded on the active :class:`Graph` only when at
least one input requires a gradient, so a forward pass through a frozen model
costs nothing extra and can never leak gradients into frozen weights.

Tensors carry a leading batch axis where convenient. Broadcasting is limited
to one case: an operand whose shape equals the trailing dims of the other is
repeated over the leading dims (bias rows, positional rows, shared prompts).
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

MASK_VALUE = -1e9

_local = threading.local()
_default_dtype = np.dtype(np.float32)


class ContractError(ValueError):
    """An operator was called with arguments violating its contract."""


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default float type (``float64`` for verification)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A float array, optionally a trainable leaf that accumulates ``grad``."""

    __slots__ = ("values", "trainable", "grad", "requires_grad", "__weakref__")

    def __init__(self, values, trainable: bool = False, dtype=None):
        self.values = np.ascontiguousarray(values, dtype=dtype or _default_dtype)
        self.trainable = bool(trainable)
        self.grad: np.ndarray | None = None
        self.requires_grad = self.trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        flag = ", trainable" if self.trainable else ""
        return f"Tensor(shape={self.shape}, dtype={self.values.dtype}{flag})"


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Graph:
    """Ordered tape of primitive operations executed while the graph is active.

    Use as a context manager around the forward pass, then call
    :meth:`backward` once on the scalar loss.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Graph":
        stack = _graph_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("graph context exited out of order")
        stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        if self._consumed:
            raise ContractError("graph already consumed by backward(); start a new forward pass")
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable trainable leaf."""
        if self._consumed:
            raise ContractError("backward() called twice on the same graph")
        if loss.values.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        if not any(n.out is loss for n in reversed(self.nodes)):
            raise ContractError("backward: loss was not produced by this graph")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for tensor, tg in zip(node.inputs, in_grads):
                if tg is None or not tensor.requires_grad:
                    continue
                if tensor.trainable:
                    if tensor.grad is None:
                        tensor.grad = np.array(tg, dtype=tensor.values.dtype)
                    else:
                        tensor.grad += tg
                else:
                    key = id(tensor)
                    if key in grads:
                        grads[key] = grads[key] + tg
                    else:
                        grads[key] = tg
        self.nodes.clear()


def backward(graph: Graph, loss: Tensor) -> None:
    graph.backward(loss)


def _graph_stack() -> list[Graph]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


def _emit(values: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.trainable = False
    out.grad = None
    out.requires_grad = False
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(out, inputs, vjp)
    return out


def _check(cond: bool, primitive: str, *shapes) -> None:
    if not cond:
        shown = ", ".join(str(tuple(s)) for s in shapes)
        raise ContractError(f"{primitive}: incompatible shapes {shown}")


def _broadcastable(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.reshape((-1,) + tuple(shape)).sum(axis=0)
    return g


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b.T`` over the last two axes).

    ``b`` is either a 2-d matrix shared across ``a``'s leading axes or has the
    same leading axes as ``a``.
    """
    av, bv = a.values, b.values
    shared = bv.ndim == 2
    _check(av.ndim >= 2 and (shared or bv.shape[:-2] == av.shape[:-2]), "matmul", av.shape, bv.shape)
    inner_b = bv.shape[-1] if transpose_b else bv.shape[-2]
    _check(av.shape[-1] == inner_b, "matmul", av.shape, bv.shape)
    bt = np.swapaxes(bv, -1, -2) if transpose_b else bv
    out = av @ bt

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bt, -1, -2)
        if b.requires_grad:
            if shared:
                a2 = av.reshape(-1, av.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                gb = g2.T @ a2 if transpose_b else a2.T @ g2
            else:
                gb = np.swapaxes(g, -1, -2) @ av if transpose_b else np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _emit(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may match only the trailing dims of ``a``."""
    _check(_broadcastable(a.shape, b.shape), "add", a.shape, b.shape)
    out = a.values + b.values

    def vjp(g):
        return (g if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may match only the trailing dims of ``a``."""
    _check(_broadcastable(a.shape, b.shape), "mul", a.shape, b.shape)
    av, bv = a.values, b.values
    out = av * bv

    def vjp(g):
        return (g * bv if a.requires_grad else None,
                _unbroadcast(g * av, b.shape) if b.requires_grad else None)

    return _emit(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.values * a.values.dtype.type(c)

    def vjp(g):
        return (g * g.dtype.type(c),)

    return _emit(out, (a,), vjp)


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(a.values.sum(), dtype=a.values.dtype)
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(out, (a,), vjp)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` above ``b`` along the row axis (second to last).

    The operand with fewer dims is repeated over the other's leading axes.
    """
    av, bv = a.values, b.values
    _check(av.ndim >= 2 and bv.ndim >= 2 and av.shape[-1] == bv.shape[-1], "concat_rows", av.shape, bv.shape)
    lead = av.shape[:-2] if av.ndim >= bv.ndim else bv.shape[:-2]
    _check(_broadcastable(lead, av.shape[:-2]) and _broadcastable(lead, bv.shape[:-2]),
           "concat_rows", av.shape, bv.shape)
    a_full = np.broadcast_to(av, lead + av.shape[-2:])
    b_full = np.broadcast_to(bv, lead + bv.shape[-2:])
    out = np.concatenate([a_full, b_full], axis=-2)
    n = av.shape[-2]

    def vjp(g):
        return (_unbroadcast(g[..., :n, :], a.shape) if a.requires_grad else None,
                _unbroadcast(g[..., n:, :], b.shape) if b.requires_grad else None)

    return _emit(out, (a, b), vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    rows = a.shape[-2] if a.values.ndim >= 2 else -1
    if not (0 <= start <= stop <= rows):
        raise ContractError(f"slice_rows: rows [{start}:{stop}] out of range for shape {a.shape}")
    out = np.ascontiguousarray(a.values[..., start:stop, :])
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop, :] = g
        return (full,)

    return _emit(out, (a,), vjp)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis after adding a constant ``mask`` to the scores."""
    x = a.values
    if mask is not None:
        _check(_broadcastable(x.shape, np.shape(mask)), "softmax", x.shape, np.shape(mask))
        x = x + mask.astype(x.dtype, copy=False)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    _check(gain.shape == (d,) and bias.shape == (d,), "layer_norm", x.shape, gain.shape, bias.shape)
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def vjp(g):
        gx = gg = gbias = None
        if x.requires_grad:
            dxhat = g * gain.values
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gbias

    return _emit(out, (x, gain, bias), vjp)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    if table.values.ndim != 2:
        raise ContractError(f"embedding: table must be 2-d, got {table.shape}")
    if ids.dtype.kind not in "iu":
        raise ContractError(f"embedding: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: id out of range for table of {table.shape[0]} rows")
    out = table.values[ids]

    def vjp(g):
        full = np.zeros_like(table.values)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit(out, (table,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.values
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _emit(out, (a,), vjp)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is set.

    ``logits`` has shape ``targets.shape + (V,)``.
    """
    lv = logits.values
    targets = np.asarray(targets)
    _check(lv.shape[:-1] == targets.shape, "cross_entropy", lv.shape, targets.shape)
    n_cls = lv.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_cls):
        raise ContractError(f"cross_entropy: target out of range for {n_cls} classes")
    if mask is None:
        w = np.ones(targets.shape, dtype=lv.dtype)
    else:
        w = np.asarray(mask, dtype=lv.dtype)
        _check(w.shape == targets.shape, "cross_entropy", lv.shape, w.shape)
    denom = w.sum()
    if denom <= 0:
        raise ContractError("cross_entropy: mask selects no positions")

    flat = lv.reshape(-1, n_cls)
    t = targets.reshape(-1)
    wf = w.reshape(-1)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = logp[np.arange(t.size), t]
    loss = np.asarray(-(wf * picked).sum() / denom, dtype=lv.dtype)

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(t.size), t] -= 1.0
        p *= (wf / denom)[:, None]
        return ((p * g).reshape(lv.shape),)

    return _emit(loss, (logits,), vjp)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """``[..., S, d]`` -> ``[..., h, S, d/h]``."""
    *lead, s, d = x.shape
    if d % n_heads:
        raise ContractError(f"split_heads: {n_heads} heads do not divide width {d}")
    dh = d // n_heads
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    out = np.ascontiguousarray(x.values.reshape(*lead, s, n_heads, dh).transpose(perm))

    def vjp(g):
        return (g.transpose(perm).reshape(*lead, s, d),)

    return _emit(out, (x,), vjp)


def merge_heads(x: Tensor) -> Tensor:
    """``[..., h, S, dh]`` -> ``[..., S, h*dh]``."""
    *lead, h, s, dh = x.shape
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    out = np.ascontiguousarray(x.values.transpose(perm).reshape(*lead, s, h * dh))

    def vjp(g):
        return (g.reshape(*lead, s, h, dh).transpose(perm),)

    return _emit(out, (x,), vjp)


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current values of ``params``.
    The error for one coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    for p in params:
        if p.values.dtype != np.float64:
            raise ContractError("grad_check requires float64 parameters")
        p.zero_grad()
    with Graph() as graph:
        loss = fn()
    if loss.requires_grad:
        graph.backward(loss)

    worst = 0.0
    for k, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            if not (math.isfinite(numeric) and math.isfinite(a)):
                raise FloatingPointError(f"grad_check: non-finite gradient at param {k}, coordinate {i}")
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
