"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded together with
the intermediates their backward rule needs.  ``Tape.backward`` (or the module
level :func:`backward`) replays the record in reverse and returns gradients for
every ``requires_grad`` tensor reachable from the loss, keyed by ``node_id``.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = mean(matmul(x, w))
    grads = tape.backward(loss)
    grads[w.node_id]
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "backward",
    "matmul",
    "conv2d",
    "relu",
    "maxpool2d",
    "add",
    "mul",
    "mean",
    "sum",
    "reshape",
    "transpose",
    "batch_norm",
    "softmax_cross_entropy",
    "finite_diff_check",
]

_ids = itertools.count(1)
_local = threading.local()


class TapeError(RuntimeError):
    """Raised for misuse of a gradient tape (consumed, missing, non-scalar)."""


class Tensor:
    """A dense float64 array that may participate in a gradient graph."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("inputs", "output", "rule")

    def __init__(self, inputs, output, rule):
        self.inputs = inputs
        self.output = output
        self.rule = rule


class Tape:
    """Ordered record of operations for one forward computation.

    Tapes are thread-confined: the active tape is tracked per thread, and
    nesting is allowed (the innermost tape records).
    """

    def __init__(self):
        self._records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        stack.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, inputs: Sequence[Tensor], output: Tensor, rule: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        output._tape = self
        self._records.append(_Record(tuple(inputs), output, rule))

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """Reverse pass from a scalar ``loss``; returns ``{node_id: gradient}``."""
        if self.consumed:
            raise TapeError("tape already consumed; run a new forward first")
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        for rec in reversed(self._records):
            g = grads.pop(rec.output.node_id, None)
            if g is None:
                continue
            in_grads = rec.rule(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node_id in grads:
                    grads[inp.node_id] = grads[inp.node_id] + gi
                else:
                    grads[inp.node_id] = gi
                if inp._tape is not self:
                    leaves[inp.node_id] = inp
        self._records.clear()
        self.consumed = True
        return {nid: grads[nid] for nid in leaves if nid in grads}


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """Run the reverse pass on the tape that produced ``loss``."""
    if loss._tape is None:
        raise TapeError("loss was not produced by a live tape")
    return loss._tape.backward(loss)


def _make(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    tape = _active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node_id = next(_ids)
    out._tape = None
    out.requires_grad = needs and tape is not None
    if out.requires_grad:
        tape._record(inputs, out, rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), rule)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def rule(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum()), (x,), rule)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def rule(g):
        return (np.full(x.shape, g / n),)

    return _make(np.asarray(x.data.mean()), (x,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def rule(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), rule)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError("transpose expects a matrix")

    def rule(g):
        return (g.T,)

    return _make(np.ascontiguousarray(x.data.T), (x,), rule)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def rule(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), rule)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def rule(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), rule)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, kh, kw, Ho, Wo), contiguous
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW input and FCKhKw kernel."""
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be non-negative, got {pad}")
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {k.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError("kernel larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(n, c * kh * kw, ho * wo)
    kmat = k.data.reshape(f, c * kh * kw)
    out = np.matmul(kmat, cols).reshape(n, f, ho, wo)

    def rule(g):
        gm = g.reshape(n, f, ho * wo)
        gk = None
        if k.requires_grad:
            gk = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(kmat.T, gm).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk

    return _make(out, (x, k), rule)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; rows/cols that do not fill a window are dropped.

    The gradient goes to the first maximal element of each window (row-major).
    """
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ValueError(f"input {x.shape} smaller than pooling window {size}")
    parts = [x.data[:, :, i:ho * size:size, j:wo * size:size] for i in range(size) for j in range(size)]
    out = parts[0].copy()
    for p in parts[1:]:
        np.maximum(out, p, out=out)

    def rule(g):
        gx = np.zeros(x.shape)
        taken = np.zeros(out.shape, dtype=bool)
        for q, p in enumerate(parts):
            hit = (p == out) & ~taken
            taken |= hit
            i, j = divmod(q, size)
            gx[:, :, i:ho * size:size, j:wo * size:size] = g * hit
        return (gx,)

    return _make(out, (x,), rule)


# ---------------------------------------------------------------------------
# normalization and loss


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Per-channel normalization of an NCHW (or NC) batch with its own statistics.

    Returns ``(out, batch_mean, batch_var)``; the variance is the biased one.
    """
    n, c = x.shape[:2]
    x3 = x.data.reshape(n, c, -1)
    m = n * x3.shape[2]
    mu = np.einsum("ncp->c", x3) / m
    xc = x3 - mu[:, None]
    var = np.einsum("ncp,ncp->c", xc, xc) / m
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc
    xhat *= inv[:, None]
    out = xhat * gamma.data[:, None]
    out += beta.data[:, None]

    def rule(g):
        g3 = g.reshape(n, c, -1)
        gbeta = np.einsum("ncp->c", g3)
        ggamma = np.einsum("ncp,ncp->c", g3, xhat)
        gx = None
        if x.requires_grad:
            scale = gamma.data * inv / m
            gx = g3 * (m * scale)[:, None]
            gx -= (scale * gbeta)[:, None]
            gx -= xhat * (scale * ggamma)[:, None]
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return _make(out.reshape(x.shape), (x, gamma, beta), rule), mu, var


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, labels])

    def rule(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss), (logits,), rule)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, coords=None,
                      skip: Optional[Callable[[int], bool]] = None) -> float:
    """Worst relative error between ``backward`` and central differences of ``f`` at ``x``.

    ``f`` maps a tensor to a scalar tensor.  ``coords`` optionally restricts the
    check to a subset of flat indices; ``skip(i)`` returning true drops flat
    index ``i`` (used for coordinates whose stencil straddles a kink).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(xt)
    if out.size != 1:
        raise ValueError(f"f must return a scalar, got shape {out.shape}")
    if out._tape is None:
        analytic = np.zeros_like(base)
    else:
        analytic = tape.backward(out).get(xt.node_id, np.zeros_like(base))

    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        if skip is not None and skip(i):
            continue
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base)).item()
        flat[i] = orig - h
        fm = f(Tensor(base)).item()
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
