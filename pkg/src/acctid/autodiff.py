"""Minimal tape-based reverse-mode autodiff over dense float64 matrices.

Usage::

    with Tape() as tape:
        y = leaky_relu(matmul(x, w))
        loss = mean(y)
    tape.backward(loss)
    w.grad  # d loss / d w

Ops record themselves on the innermost active tape when any input requires a
gradient. ``Tape.backward`` walks the recorded ops in exact reverse order.
Gradients of intermediate tensors are held by the tape; leaf tensors (those
not produced on the tape) accumulate into ``Tensor.grad``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import EmptySegment, NonFiniteValue, ShapeMismatch, SnapshotFormatError, ZeroVector

_TAPES: list["Tape"] = []


def _check_finite(v, what):
    if not np.isfinite(v).all():
        raise NonFiniteValue(f"non-finite value produced by {what}")


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        if v.ndim != 2:
            raise ShapeMismatch(f"tensors are 2-D, got shape {v.shape}")
        _check_finite(v, name or "tensor")
        self.value = v
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def param(value, name=None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def const(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Ordered record of ops with their backward closures."""

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple, object]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def backward(self, loss: Tensor, seed_grad=None) -> None:
        if seed_grad is None:
            if loss.value.size != 1:
                raise ShapeMismatch("backward without a seed gradient needs a scalar loss")
            seed_grad = np.ones_like(loss.value)
        produced = {id(out) for out, _, _ in self.ops}
        grads = {id(loss): np.asarray(seed_grad, dtype=np.float64)}
        if id(loss) not in produced:
            if loss.requires_grad:
                loss.grad = grads[id(loss)].copy() if loss.grad is None else loss.grad + grads[id(loss)]
            return
        for out, inputs, back in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, back(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    grads[key] = gi if key not in grads else grads[key] + gi
                else:
                    inp.grad = np.array(gi, copy=True) if inp.grad is None else inp.grad + gi


def _record(value, inputs, backward, what):
    _check_finite(value, what)
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.requires_grad = needs
    out.name = None
    if needs and _TAPES:
        _TAPES[-1].ops.append((out, tuple(inputs), backward))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _same_or_broadcast(a, b, what):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{what}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise / algebra --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same_or_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same_or_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same_or_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def scale(a, c: float) -> Tensor:
    a = const(a)
    c = float(c)
    return _record(a.value * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a, c: float) -> Tensor:
    a = const(a)
    return _record(a.value + float(c), (a,), lambda g: (g,), "add_scalar")


def exp(a) -> Tensor:
    a = const(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.value)
    return _record(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = const(a)
    av = a.value
    if (av <= 0).any():
        raise NonFiniteValue("log of a non-positive value")
    return _record(np.log(av), (a,), lambda g: (g / av,), "log")


def matmul(a, b) -> Tensor:
    """``a @ b``; ``a`` may also be a constant scipy sparse matrix."""
    b = const(b)
    if sp.issparse(a):
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
        at = a.T.tocsr()
        return _record(np.asarray(a @ b.value), (b,), lambda g: (np.asarray(at @ g),), "matmul")
    a = const(a)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = const(a)
    return _record(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def concat_cols(parts) -> Tensor:
    parts = [const(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeMismatch(f"concat_cols: row counts differ {sorted(rows)}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    return _record(np.concatenate([p.value for p in parts], axis=1), tuple(parts),
                   lambda g: tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])),
                   "concat_cols")


def concat_rows(parts) -> Tensor:
    parts = [const(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeMismatch(f"concat_rows: column counts differ {sorted(cols)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return _record(np.concatenate([p.value for p in parts], axis=0), tuple(parts),
                   lambda g: tuple(g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])),
                   "concat_rows")


def rows(a, index) -> Tensor:
    """Row gather ``a[index]``; ``index`` is a slice or an integer array."""
    a = const(a)
    n = a.shape[0]
    if isinstance(index, slice):
        def back(g):
            out = np.zeros((n, g.shape[1]))
            out[index] = g
            return (out,)
        return _record(a.value[index].copy(), (a,), back, "rows")
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeMismatch(f"rows: index out of range for {n} rows")

    return _record(a.value[idx], (a,), lambda g: (_scatter_rows(g, idx, n),), "rows")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = const(a)
    d = np.where(a.value > 0, 1.0, slope)
    return _record(a.value * d, (a,), lambda g: (g * d,), "leaky_relu")


def relu(a) -> Tensor:
    a = const(a)
    d = (a.value > 0).astype(np.float64)
    return _record(a.value * d, (a,), lambda g: (g * d,), "relu")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = const(a)
    pos = a.value > 0
    neg = alpha * np.expm1(np.minimum(a.value, 0.0))
    y = np.where(pos, a.value, neg)
    d = np.where(pos, 1.0, neg + alpha)
    return _record(y, (a,), lambda g: (g * d,), "elu")


def dropout(a, rate: float, train: bool, rng=None) -> Tensor:
    """Inverted dropout at train time, identity otherwise."""
    a = const(a)
    if not train or rate <= 0.0:
        return a
    rng = np.random.default_rng() if rng is None else rng
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _record(a.value * keep, (a,), lambda g: (g * keep,), "dropout")


def sum_all(a) -> Tensor:
    a = const(a)
    shape = a.shape
    return _record(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def mean(a) -> Tensor:
    a = const(a)
    shape = a.shape
    n = a.value.size
    return _record(np.array([[a.value.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),), "mean")


def sum_rows(a) -> Tensor:
    """Row sums as an (n, 1) column."""
    a = const(a)
    k = a.shape[1]
    return _record(a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, k, axis=1),), "sum_rows")


def diagonal(a) -> Tensor:
    a = const(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"diagonal of non-square {a.shape}")
    n = a.shape[0]
    return _record(np.diag(a.value).reshape(n, 1).copy(), (a,), lambda g: (np.diag(g[:, 0]),), "diagonal")


def logsumexp_rows(a, mask=None) -> Tensor:
    """Row-wise ``log sum exp`` over entries where ``mask`` is true."""
    a = const(a)
    m = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ShapeMismatch(f"logsumexp_rows: mask {m.shape} vs {a.shape}")
    if not m.any(axis=1).all():
        raise EmptySegment("logsumexp_rows: a row has no unmasked entries")
    x = np.where(m, a.value, -np.inf)
    top = x.max(axis=1, keepdims=True)
    e = np.where(m, np.exp(x - top), 0.0)
    s = e.sum(axis=1, keepdims=True)
    w = e / s
    return _record(top + np.log(s), (a,), lambda g: (g * w,), "logsumexp_rows")


def softmax_rows(a) -> Tensor:
    a = const(a)
    x = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)
    return _record(y, (a,), back, "softmax_rows")


def l2_normalize_rows(a) -> Tensor:
    a = const(a)
    norm = np.sqrt((a.value ** 2).sum(axis=1, keepdims=True))
    if (norm == 0).any():
        raise ZeroVector("cannot normalize an all-zero row")
    y = a.value / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)
    return _record(y, (a,), back, "l2_normalize_rows")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax of the labeled class."""
    logits = const(logits)
    y = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if y.shape != (n,) or (y.size and (y.min() < 0 or y.max() >= c)):
        raise ShapeMismatch(f"cross_entropy: labels {y.shape} for logits {logits.shape}")
    x = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1))
    loss = float(np.mean(lse - x[np.arange(n), y]))
    p = np.exp(x - lse[:, None])

    def back(g):
        d = p.copy()
        d[np.arange(n), y] -= 1.0
        return (d * (g[0, 0] / n),)
    return _record(np.array([[loss]]), (logits,), back, "cross_entropy")


# --- segment ops ------------------------------------------------------------

class _Segments:
    """Precomputed grouping of rows by segment id (all segments non-empty)."""

    def __init__(self, seg, nseg, what):
        seg = np.asarray(seg, dtype=np.int64)
        if seg.size and (seg.min() < 0 or seg.max() >= nseg):
            raise ShapeMismatch(f"{what}: segment id out of range")
        counts = np.bincount(seg, minlength=nseg)
        if (counts == 0).any():
            raise EmptySegment(f"{what}: segment {int(np.argmin(counts))} is empty")
        self.seg = seg
        self.nseg = nseg
        self.order = np.argsort(seg, kind="stable")
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self._ind = None

    @property
    def indicator(self):
        if self._ind is None:
            m = self.seg.shape[0]
            self._ind = sp.csr_matrix((np.ones(m), (self.seg, np.arange(m))), shape=(self.nseg, m))
        return self._ind

    def sum(self, values):
        return np.asarray(self.indicator @ values)

    def reduce(self, ufunc, values):
        return ufunc.reduceat(values[self.order], self.starts, axis=0)


def _scatter_rows(g, idx, n):
    """``out[idx[r]] += g[r]`` for an (m, d) gradient."""
    m = idx.shape[0]
    if m == 0:
        return np.zeros((n, g.shape[1]))
    ind = sp.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(n, m))
    return np.asarray(ind @ g)


def segment_softmax(scores, seg, nseg: int) -> Tensor:
    """Softmax of an (m, 1) score column within each segment."""
    scores = const(scores)
    if scores.shape[1] != 1:
        raise ShapeMismatch("segment_softmax expects an (m, 1) column")
    S = _Segments(seg, nseg, "segment_softmax")
    s = scores.value
    top = S.reduce(np.maximum, s)
    e = np.exp(s - top[S.seg])
    w = e / S.sum(e)[S.seg]

    def back(g):
        dot = S.sum(g * w)
        return (w * (g - dot[S.seg]),)
    return _record(w, (scores,), back, "segment_softmax")


def segment_weighted_sum(weights, values, seg, nseg: int) -> Tensor:
    """``out[s] = sum over rows r in segment s of weights[r] * values[r]``."""
    weights, values = const(weights), const(values)
    if weights.shape != (values.shape[0], 1):
        raise ShapeMismatch(f"segment_weighted_sum: weights {weights.shape} vs values {values.shape}")
    S = _Segments(seg, nseg, "segment_weighted_sum")
    w, v = weights.value, values.value

    def back(g):
        gs = g[S.seg]
        return ((gs * v).sum(axis=1, keepdims=True), gs * w)
    return _record(S.sum(w * v), (weights, values), back, "segment_weighted_sum")


def segment_max(a, seg, nseg: int) -> Tensor:
    """Column-wise max over the rows of each segment (first row wins ties)."""
    a = const(a)
    S = _Segments(seg, nseg, "segment_max")
    n, d = a.shape
    top = S.reduce(np.maximum, a.value)
    hit = a.value == top[S.seg]
    first = S.reduce(np.minimum, np.where(hit, np.arange(n)[:, None], n))
    cols = np.broadcast_to(np.arange(d), (nseg, d))

    def back(g):
        out = np.zeros((n, d))
        out[first, cols] = g
        return (out,)
    return _record(top, (a,), back, "segment_max")


def column_max(a) -> Tensor:
    a = const(a)
    return segment_max(a, np.zeros(a.shape[0], dtype=np.int64), 1)


# --- gradient checking --------------------------------------------------------

def numeric_grad(f, tensors, eps: float = 1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each tensor."""
    out = []
    for t in tensors:
        g = np.zeros_like(t.value)
        flat = t.value.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = f().item()
            flat[i] = old - eps
            lo = f().item()
            flat[i] = old
            gf[i] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def analytic_grad(f, tensors):
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return [np.zeros_like(t.value) if t.grad is None else t.grad for t in tensors]


def gradcheck(f, tensors, eps: float = 1e-5) -> float:
    """Max of ``|analytic - numeric| / max(1, |numeric|)`` over all entries."""
    ana = analytic_grad(f, tensors)
    num = numeric_grad(f, tensors, eps)
    worst = 0.0
    for a, n in zip(ana, num):
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))))
    return worst


# --- optimizers ---------------------------------------------------------------

def adam_step(params: dict, grads: dict, state: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8) -> None:
    """One in-place Adam update. ``state`` holds ``step``, ``m`` and ``v``."""
    b1, b2 = betas
    state["step"] = step = state.get("step", 0) + 1
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        mi = m[name] = b1 * m.get(name, 0.0) + (1 - b1) * g
        vi = v[name] = b2 * v.get(name, 0.0) + (1 - b2) * g * g
        mhat = mi / (1 - b1 ** step)
        vhat = vi / (1 - b2 ** step)
        p.value -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state: dict = {"step": 0, "m": {}, "v": {}}

    def step(self):
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return {
            "step": self.state["step"],
            "m": {k: np.array(v, copy=True) for k, v in self.state["m"].items()},
            "v": {k: np.array(v, copy=True) for k, v in self.state["v"].items()},
        }

    def load_state_dict(self, state):
        self.state = {
            "step": state["step"],
            "m": {k: np.array(v, copy=True) for k, v in state["m"].items()},
            "v": {k: np.array(v, copy=True) for k, v in state["v"].items()},
        }


class SGD:
    def __init__(self, params: dict, lr=1e-3):
        self.params = params
        self.lr = lr

    def step(self):
        for p in self.params.values():
            if p.grad is not None:
                p.value -= self.lr * p.grad

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# --- checkpoint archive ---------------------------------------------------------

CKPT_MAGIC = b"HGATE1"


def save_tensors(path, tensors: dict, metadata: dict | None = None) -> None:
    """Write the ``HGATE1`` archive: magic, JSON metadata block, named tensors.

    Each tensor entry is ``u32 name length, name, u32 rows, u32 cols`` followed by
    row-major little-endian float64 values.
    """
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", len(meta)) + meta
    buf += struct.pack("<I", len(tensors))
    for name, t in tensors.items():
        v = t.value if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        if v.ndim == 1:
            v = v.reshape(1, -1)
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<II", *v.shape)
        buf += np.ascontiguousarray(v, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_tensors(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise SnapshotFormatError(f"{path}: not an HGATE1 checkpoint", path=path)
    try:
        return _parse_tensors(data, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise SnapshotFormatError(f"{path}: truncated or corrupt checkpoint ({exc})", path=path) from None


def _parse_tensors(data: bytes, path) -> tuple[dict, dict]:
    pos = len(CKPT_MAGIC)
    (ml,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + ml].decode("utf-8"))
    pos += ml
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nl].decode("utf-8")
        pos += nl
        r, c = struct.unpack_from("<II", data, pos)
        pos += 8
        out[name] = np.frombuffer(data, dtype="<f8", count=r * c, offset=pos).reshape(r, c).astype(np.float64)
        pos += 8 * r * c
    if pos != len(data):
        raise SnapshotFormatError(f"{path}: trailing bytes in checkpoint", path=path)
    return out, meta
