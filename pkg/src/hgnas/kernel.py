"""Dense 2-D tensors with a minimal reverse-mode tape.

Every op takes and returns :class:`Tensor` objects holding row-major float64
matrices.  When any input requires a gradient the op appends a closure to
the owning :class:`Tape`; :meth:`Tape.backward` replays those closures in
reverse order, accumulating gradients additively.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

REDUCERS = ("sum", "min", "max", "mean")


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "tape")

    def __init__(self, value, tape: "Tape | None" = None, requires_grad: bool = False):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim == 1:
            v = v.reshape(1, -1)
        if v.ndim != 2:
            raise ValueError(f"Tensor needs a 2-D array, got shape {v.shape}")
        self.value = v
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray, owned: bool = False):
        # owned: g is a fresh array nobody else holds, so it can be adopted
        if self.grad is None:
            self.grad = g if owned and g.dtype == np.float64 else np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


class Tape:
    """Records differentiable ops; ``Tape(enabled=False)`` records nothing."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._ops: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self):
        return len(self._ops)

    def leaf(self, value) -> Tensor:
        return Tensor(value, self, requires_grad=self.enabled)

    def const(self, value) -> Tensor:
        return Tensor(value, self, requires_grad=False)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
        if self.enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            self._ops.append((out, backward))
        return out

    def backward(self, out: Tensor, upstream: np.ndarray | None = None):
        """Propagate d(out) back through every recorded op, once each."""
        if upstream is None:
            if out.value.size != 1:
                raise ValueError("backward() without upstream gradient needs a scalar output")
            upstream = np.ones_like(out.value)
        out._accumulate(upstream)
        for node, fn in reversed(self._ops):
            if node.grad is not None:
                fn(node.grad)
        self._ops.clear()


def _tape(*ts: Tensor) -> Tape:
    for t in ts:
        if t.tape is not None:
            return t.tape
    return Tape(enabled=False)


def _push(t: Tensor, g: np.ndarray, owned: bool = False):
    if t.requires_grad:
        t._accumulate(g, owned)


# --- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    tape = _tape(a, b)
    out = Tensor(a.value @ b.value, tape)

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T, True)
        if b.requires_grad:
            b._accumulate(a.value.T @ g, True)

    return tape.record(out, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a single row broadcast over ``a``."""
    if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    tape = _tape(a, b)
    out = Tensor(a.value + b.value, tape)

    def back(g):
        _push(a, g)
        if b.requires_grad:
            b._accumulate(g if b.shape == g.shape else g.sum(axis=0, keepdims=True))

    return tape.record(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}")
    tape = _tape(a, b)
    out = Tensor(a.value - b.value, tape)

    def back(g):
        _push(a, g)
        _push(b, -g)

    return tape.record(out, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    tape = _tape(a)
    out = Tensor(a.value * c, tape)
    return tape.record(out, (a,), lambda g: _push(a, g * c))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Column-wise concatenation."""
    tape = _tape(*parts)
    out = Tensor(np.concatenate([p.value for p in parts], axis=1), tape)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _push(p, g[:, lo:hi])

    return tape.record(out, parts, back)


def spmm(a: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times ``x``."""
    if a.shape[1] != x.shape[0]:
        raise ValueError(f"spmm shape mismatch: {a.shape} x {x.shape}")
    a = sp.csr_matrix(a)
    tape = _tape(x)
    out = Tensor(np.asarray(a @ x.value), tape)
    at = a.T.tocsr()
    return tape.record(out, (x,), lambda g: _push(x, np.asarray(at @ g), True))


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``x[index]``; the backward pass scatter-adds."""
    index = np.asarray(index, dtype=np.intp)
    tape = _tape(x)
    out = Tensor(x.value[index], tape)
    n = x.shape[0]

    def back(g):
        if x.requires_grad:
            x._accumulate(_scatter_sum(g, index, n), True)

    return tape.record(out, (x,), back)


def fold_cols(x: Tensor, width: int) -> Tensor:
    """Map column c onto column ``c % width`` by summation (zero-pads narrow inputs)."""
    n, d = x.shape
    tape = _tape(x)
    if d == width:
        return x
    if d < width:
        v = np.zeros((n, width))
        v[:, :d] = x.value
        out = Tensor(v, tape)
        return tape.record(out, (x,), lambda g: _push(x, g[:, :d]))
    cols = np.arange(d) % width
    v = np.zeros((n, width))
    for c in range(0, d, width):
        chunk = x.value[:, c : c + width]
        v[:, : chunk.shape[1]] += chunk
    out = Tensor(v, tape)
    return tape.record(out, (x,), lambda g: _push(x, g[:, cols]))


# --- nonlinearities ---------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    tape = _tape(x)
    pos = x.value > 0
    v = x.value * slope
    np.copyto(v, x.value, where=pos)
    out = Tensor(v, tape)

    def back(g):
        if x.requires_grad:
            gx = g * slope
            np.copyto(gx, g, where=pos)
            x._accumulate(gx, True)

    return tape.record(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def pointwise(op: str, x: Tensor, slope: float = 0.01) -> Tensor:
    if op == "relu":
        return relu(x)
    if op == "leaky_relu":
        return leaky_relu(x, slope)
    raise ValueError(f"unknown pointwise op {op!r}")


def row_scale(x: Tensor, factors) -> Tensor:
    """Multiply row i by the constant ``factors[i]``."""
    f = np.asarray(factors, dtype=np.float64).reshape(-1, 1)
    tape = _tape(x)
    out = Tensor(x.value * f, tape)
    return tape.record(out, (x,), lambda g: _push(x, g * f))


def expm1(x: Tensor) -> Tensor:
    tape = _tape(x)
    e = np.exp(x.value)
    out = Tensor(e - 1.0, tape)
    return tape.record(out, (x,), lambda g: _push(x, g * e))


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row as an (n, 1) tensor; zero rows get zero gradient."""
    tape = _tape(x)
    nrm = np.sqrt((x.value**2).sum(axis=1, keepdims=True))
    out = Tensor(nrm, tape)

    def back(g):
        safe = np.where(nrm > 0, nrm, 1.0)
        _push(x, np.where(nrm > 0, g * x.value / safe, 0.0))

    return tape.record(out, (x,), back)


# --- segment reductions -----------------------------------------------------


def _incidence(targets: np.ndarray, num_segments: int, n: int) -> sp.csr_matrix:
    return sp.csr_matrix(
        (np.ones(n), (targets, np.arange(n))), shape=(num_segments, n)
    )


def _scatter_sum(values: np.ndarray, targets: np.ndarray, num_segments: int) -> np.ndarray:
    if len(targets) == 0:
        return np.zeros((num_segments, values.shape[1]))
    return np.asarray(_incidence(targets, num_segments, len(targets)) @ values)


def segment_reduce(messages: Tensor, targets, num_segments: int, reducer: str) -> Tensor:
    """Reduce rows of ``messages`` grouped by ``targets``.

    Empty segments produce zero rows.  min/max route the gradient to the first
    row attaining the extremum in each column.
    """
    if reducer not in REDUCERS:
        raise ValueError(f"unknown reducer {reducer!r}")
    targets = np.asarray(targets, dtype=np.intp)
    n, d = messages.shape
    if targets.shape != (n,):
        raise ValueError(f"targets length {targets.shape} != message rows {n}")
    if n and (targets.min() < 0 or targets.max() >= num_segments):
        raise ValueError(f"segment id out of range [0, {num_segments})")
    tape = _tape(messages)
    counts = np.bincount(targets, minlength=num_segments).astype(np.float64)
    m = messages.value

    if reducer in ("sum", "mean"):
        total = _scatter_sum(m, targets, num_segments)
        if reducer == "mean":
            denom = np.where(counts > 0, counts, 1.0)[:, None]
            total = total / denom
        out = Tensor(total, tape)

        def back(g):
            if reducer == "mean":
                g = g / denom
            _push(messages, g[targets])

        return tape.record(out, (messages,), back)

    if n and len(counts) and counts[0] > 0 and np.all(counts == counts[0]) and np.all(np.diff(targets) >= 0):
        return _regular_extremum(messages, num_segments, int(counts[0]), reducer, tape)

    order = np.argsort(targets, kind="stable")
    sorted_t = targets[order]
    nonempty = np.flatnonzero(counts)
    starts = np.searchsorted(sorted_t, nonempty)
    ufunc = np.maximum if reducer == "max" else np.minimum
    res = np.zeros((num_segments, d))
    argrow = np.zeros((len(nonempty), d), dtype=np.intp)
    if n:
        ms = m[order]
        red = ufunc.reduceat(ms, starts, axis=0)
        res[nonempty] = red
        hit = ms == res[sorted_t]
        cand = np.where(hit, np.arange(n)[:, None], n)
        first = np.minimum.reduceat(cand, starts, axis=0)
        argrow = order[first]
    out = Tensor(res, tape)

    def back(g):
        if messages.requires_grad and n:
            gm = np.zeros_like(m)
            cols = np.broadcast_to(np.arange(d), argrow.shape)
            gm[argrow, cols] = g[nonempty]
            messages._accumulate(gm)

    return tape.record(out, (messages,), back)


def _regular_extremum(messages: Tensor, s: int, c: int, reducer: str, tape: Tape) -> Tensor:
    # sorted targets, every segment exactly c rows: reduce a (s, c, d) view
    d = messages.shape[1]
    view = messages.value.reshape(s, c, d)
    res = view.max(axis=1) if reducer == "max" else view.min(axis=1)
    out = Tensor(res, tape)

    def back(g):
        if messages.requires_grad:
            hit = view == res[:, None, :]
            if c > 1 and hit.sum(axis=1).max() > 1:
                hit &= np.cumsum(hit, axis=1) == 1  # first row wins ties
            gm = hit * g[:, None, :]
            messages._accumulate(gm.reshape(s * c, d), True)

    return tape.record(out, (messages,), back)


# --- losses -----------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax."""
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.value
    shift = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - logsum
    n = z.shape[0]
    tape = _tape(logits)
    out = Tensor([[-logp[np.arange(n), labels].mean()]], tape)

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _push(logits, p * (g[0, 0] / n))

    return tape.record(out, (logits,), back)


def mape(pred: Tensor, true) -> Tensor:
    """Mean absolute percentage error, as a fraction (1.0 == 100%)."""
    t = np.asarray(true, dtype=np.float64).reshape(pred.shape)
    if np.any(t <= 0):
        raise ValueError("MAPE needs strictly positive true values")
    diff = pred.value - t
    tape = _tape(pred)
    out = Tensor([[np.mean(np.abs(diff) / t)]], tape)
    n = diff.size
    return tape.record(out, (pred,), lambda g: _push(pred, g[0, 0] * np.sign(diff) / t / n))


# --- optimizer --------------------------------------------------------------


class SGD:
    """Plain SGD with optional momentum over a dict of named arrays."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.0, clip: float | None = None):
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        if self.clip is not None:
            norm = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
            factor = min(1.0, self.clip / norm) if norm > 0 else 1.0
        else:
            factor = 1.0
        for name in sorted(grads):
            g = grads[name] * factor
            if self.momentum:
                v = self._velocity.get(name)
                v = g if v is None else self.momentum * v + g
                self._velocity[name] = v
                g = v
            params[name] -= self.lr * g


class Adam:
    """Adam over a dict of named arrays, with optional global-norm clipping."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = None,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        factor = 1.0
        if self.clip is not None:
            norm = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
            factor = min(1.0, self.clip / norm) if norm > 0 else 1.0
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name in sorted(grads):
            g = grads[name] * factor
            m = self._m.get(name, 0.0) * self.b1 + (1 - self.b1) * g
            v = self._v.get(name, 0.0) * self.b2 + (1 - self.b2) * g * g
            self._m[name], self._v[name] = m, v
            if self.weight_decay and not name.endswith("/b"):
                # decoupled decay, biases exempt
                params[name] *= 1.0 - self.lr * self.weight_decay
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5, index=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (modified in place)."""
    grad = np.zeros_like(x)
    idx = np.ndindex(x.shape) if index is None else index
    for i in idx:
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad
