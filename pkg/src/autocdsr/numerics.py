"""Small tape-based reverse-mode autodiff over numpy arrays.

Only the operations needed by the sequence encoder and its two losses are
provided. Every op takes and returns :class:`Tensor` objects; when a
:class:`Tape` is active and at least one input requires a gradient, the op
records a closure computing the input adjoints from the output adjoint.

Example
-------
>>> w = parameter(np.ones((2, 2)), "w")
>>> with Tape() as tape:
...     loss = sum_all(w)
>>> backward(loss, tape)["w"]
array([[1., 1.],
       [1., 1.]])
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "parameter",
    "constant",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "row_softmax",
    "layer_norm",
    "gelu",
    "embedding",
    "take",
    "concat",
    "reshape",
    "transpose",
    "sum_all",
    "mean_all",
    "sum_axis",
    "cosine_scores",
    "softmax_cross_entropy",
]

_GELU_C = math.sqrt(2.0 / math.pi)
_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf while finiteness checks are on."""


class Tensor:
    """Immutable array with an optional slot on the active tape.

    Parameters
    ----------
    data : array_like
        Values. Stored as a read-only numpy array.
    name : str, optional
        Stable identifier; only named tensors appear in gradient maps.
    requires_grad : bool
        Whether adjoints should flow into this tensor.
    """

    __slots__ = ("data", "name", "requires_grad", "_backward", "_parents")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.name = name
        self.requires_grad = requires_grad
        self._backward: Callable | None = None
        self._parents: tuple = ()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, copy=True), name=name, requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Records differentiable ops executed inside its ``with`` block.

    A tape belongs to the thread that opened it. Nodes are appended in
    execution order, which is a topological order of the graph.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Tensor] = []
        self.check_finite = check_finite
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)


def _current_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _finish(out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _current_tape()
    if tape is not None and tape.check_finite and not np.all(np.isfinite(out)):
        raise NonFiniteError("operation produced non-finite values")
    t = Tensor(out)
    if tape is not None and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
        tape.nodes.append(t)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(
    loss: Tensor,
    tape: Tape,
    params: Mapping[str, Tensor] | Iterable[Tensor] | None = None,
) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a map from parameter name to gradient. When ``params`` is given,
    every listed parameter appears in the result, with zeros if the loss does
    not depend on it. The tape is left intact, so several losses recorded on
    the same tape can be differentiated one after another.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if p._backward is None:
                leaves[key] = p
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if loss._backward is None and loss.requires_grad:
        leaves[id(loss)] = loss

    out: dict[str, np.ndarray] = {}
    for key, leaf in leaves.items():
        if leaf.name is not None and key in grads:
            out[leaf.name] = grads[key].astype(leaf.dtype, copy=False)
    if params is not None:
        items = params.values() if isinstance(params, Mapping) else params
        full = {}
        for p in items:
            g = out.get(p.name)
            full[p.name] = np.zeros_like(p.data) if g is None else g
        return full
    return out


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _finish(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _finish(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _finish(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)  # a numpy float64 scalar would promote float32 data
    return _finish(a.data * c, (a,), lambda g: (g * c,))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x  # x**3 goes through pow and is far slower
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner
        return (g * d,)

    return _finish(out, (a,), bw)


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _finish(ad @ bd, (a, b), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _finish(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _finish(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]``; ids of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    flat = ids.reshape(-1)

    def bw(g):
        g2 = g.reshape(-1, table.shape[-1])
        out = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(out, flat, g2)
        return (out,)

    return _finish(table.data[ids], (table,), bw)


def take(a: Tensor, index: tuple) -> Tensor:
    """Advanced-index selection ``a[index]`` with scatter-add adjoint."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _finish(a.data[index], (a,), bw)


# --------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _finish(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _finish(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),)
    )


def sum_axis(a: Tensor, axis) -> Tensor:
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _finish(a.data.sum(axis=axis), (a,), bw)


# ---------------------------------------------------------------- attention


def row_softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an additive mask of 0 / -inf entries.

    Masked entries come out as exact zeros. A row whose entries are all
    masked is rejected.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask)
        blocked = np.isneginf(mask)
        if np.any(np.all(blocked, axis=-1)):
            raise ValueError("row_softmax: fully masked row")
        x = np.where(blocked, -np.inf, x)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _finish(p, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs a last dimension of at least 2")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if a.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * np.mean(gh * xhat, axis=-1, keepdims=True)
            )
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return _finish(out, (a, gain, bias), bw)


# ------------------------------------------------------------------ scoring


def cosine_scores(h: Tensor, table: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of every row of ``h`` (N, r) with every row of ``table`` (V, r)."""
    hd, td = h.data, table.data
    hn = np.sqrt(np.sum(hd * hd, axis=-1, keepdims=True)) + eps
    tn = np.sqrt(np.sum(td * td, axis=-1, keepdims=True)) + eps
    hu, tu = hd / hn, td / tn
    s = hu @ tu.T

    def bw(g):
        gh = gt = None
        if h.requires_grad:
            ghu = g @ tu
            gh = (ghu - hu * np.sum(ghu * hu, axis=-1, keepdims=True)) / hn
        if table.requires_grad:
            gtu = g.T @ hu
            gt = (gtu - tu * np.sum(gtu * tu, axis=-1, keepdims=True)) / tn
        return gh, gt

    return _finish(s, (h, table), bw)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, candidates: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy of rows of ``logits`` (N, C) against integer targets.

    ``candidates`` optionally restricts each row to a subset of columns
    (N, k); the target column must then be given as an index into that subset.
    """
    x = logits.data
    n = x.shape[0]
    if n == 0:
        raise ValueError("softmax_cross_entropy: empty batch")
    targets = np.asarray(targets)
    if candidates is not None:
        rows = np.arange(n)[:, None]
        xs = x[rows, candidates]
    else:
        xs = x
    if xs.shape[-1] == 0:
        raise ValueError("softmax_cross_entropy: empty candidate set")
    m = xs.max(axis=-1, keepdims=True)
    e = np.exp(xs - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = (xs - m) - np.log(z)
    loss = -logp[np.arange(n), targets].mean()

    def bw(g):
        p = e / z
        p[np.arange(n), targets] -= 1.0
        p *= g / n
        if candidates is None:
            return (p,)
        out = np.zeros_like(x)
        np.add.at(out, (np.arange(n)[:, None], candidates), p)
        return (out,)

    return _finish(np.asarray(loss), (logits,), bw)
