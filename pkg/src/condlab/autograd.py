"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (the transformer, the conv image encoder, the losses)
is built from the ops in this module.  Differentiation is define-by-run:
each op appends one entry to a thread-local tape holding the parent tensors
and a closure that turns the output gradient into parent gradients.
``backward`` replays the tape in reverse and then discards it, so one
forward build supports exactly one backward pass.

Training code runs in float32 by default; the gradient-check suite builds
float64 tensors and compares analytic gradients against central finite
differences.  Tensor values are treated as immutable once created (the
trainer mutates parameter ``.data`` in place only between steps).
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from itertools import count

import numpy as np

DEFAULT_DTYPE = np.float32

_node_ids = count()


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class Tape:
    """Ordered op record; parents always precede children."""

    def __init__(self):
        self.entries = []  # (out_tensor, parents, backward_fn)
        self.consumed = False


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_STATE = _State()


def current_tape() -> Tape:
    return _STATE.tape


@contextmanager
def no_grad():
    """Disable tape recording (eval / generation)."""
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class Tensor:
    """N-dimensional float array, row-major, optionally tracked on the tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; zeros if this tensor never participated."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _acc(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t._grad is None:
        t._grad = np.zeros_like(t.data)
    t._grad += g


def _record(out: Tensor, parents, backward_fn) -> Tensor:
    if _STATE.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = _STATE.tape
        _STATE.tape.entries.append((out, parents, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(root: Tensor):
    """Reverse sweep from a scalar root; populates grads of participating leaves.

    Consumes the current tape: a fresh tape is installed afterwards, and a
    second backward over the same build raises.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    tape = _STATE.tape
    if root._tape is not None:
        if root._tape.consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if root._tape is not tape:
            raise ValueError("backward root was not built on the current tape")
    root._grad = np.ones_like(root.data)
    for out, _parents, fn in reversed(tape.entries):
        g = out._grad
        if g is None:
            continue
        fn(g)
    tape.consumed = True
    _STATE.tape = Tape()


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data + b.data)

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data - b.data)

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data * b.data)

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    return _record(out, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    out = Tensor(x.data.T)

    def bw(g):
        _acc(x, g.T)

    return _record(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bw(g):
        _acc(x, g.reshape(x.data.shape))

    return _record(out, (x,), bw)


def concat_rows(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.data.shape[0] for p in parts]

    def bw(g):
        off = 0
        for p, n in zip(parts, sizes):
            _acc(p, g[off : off + n])
            off += n

    return _record(out, tuple(parts), bw)


def concat_cols(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    sizes = [p.data.shape[1] for p in parts]

    def bw(g):
        off = 0
        for p, n in zip(parts, sizes):
            _acc(p, g[:, off : off + n])
            off += n

    return _record(out, tuple(parts), bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[:, start:stop])

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            _acc(x, gx)

    return _record(out, (x,), bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[start:stop])

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[start:stop] = g
            _acc(x, gx)

    return _record(out, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def bw(g):
        _acc(x, np.full_like(x.data, g))

    return _record(out, (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))

    def bw(g):
        _acc(x, np.full_like(x.data, g / n))

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# neural-net kernels

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Elementwise GELU, tanh approximation (gelu(0) == 0)."""
    xd = x.data
    u = _GELU_K * (xd + _GELU_C * xd**3)
    t = np.tanh(u)
    out = Tensor(0.5 * xd * (1.0 + t))

    def bw(g):
        if x.requires_grad:
            du = _GELU_K * (1.0 + 3.0 * _GELU_C * xd**2)
            _acc(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du))

    return _record(out, (x,), bw)


def _softmax_np(s: np.ndarray) -> np.ndarray:
    m = np.max(s, axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by max subtraction.

    Rows may contain -inf entries (additive masking); at least one finite
    entry per row is assumed.  NaN input yields NaN output.
    """
    y = _softmax_np(x.data)
    out = Tensor(y)

    def bw(g):
        if x.requires_grad:
            dot = np.sum(g * y, axis=-1, keepdims=True)
            _acc(x, y * (g - dot))

    return _record(out, (x,), bw)


_COND_CLAMP = 30.0


def cond_softmax(text_scores: Tensor, cond_scores: Tensor) -> Tensor:
    """Attention weights over text keys plus bonus weights over conditioning keys.

    Returns the row-wise concatenation [P | B] where P is exactly the plain
    softmax over ``text_scores`` (bit-identical to :func:`softmax_rows`) and
    B_k = exp(c_k - m) / (Z + sum_k exp(c_k - m)) with m, Z the text row max
    and shifted normalizer.  Text weights are deliberately *not* renormalized
    by the conditioning mass: with zero-projected conditioning values the
    attention output is then bit-identical to the unconditioned path, while
    B stays strictly positive so conditioning parameters receive gradient.

    Conditioning exponents are clamped at m + 30 as an overflow guard; the
    clamp region carries zero gradient.
    """
    s = text_scores.data
    q = cond_scores.data
    m = np.max(s, axis=-1, keepdims=True)
    e = np.exp(s - m)
    z = np.sum(e, axis=-1, keepdims=True)
    p = e / z
    shifted = q - m
    eq = np.exp(np.minimum(shifted, _COND_CLAMP))
    denom = z + np.sum(eq, axis=-1, keepdims=True)
    b = eq / denom
    out = Tensor(np.concatenate([p, b], axis=-1))
    t_cols = s.shape[-1]

    def bw(g):
        gp = g[..., :t_cols]
        gb = g[..., t_cols:]
        sum_b = np.sum(gb * b, axis=-1, keepdims=True)
        if text_scores.requires_grad:
            dot = np.sum(gp * p, axis=-1, keepdims=True)
            rho = z / denom
            _acc(text_scores, p * (gp - dot) - (p * rho) * sum_b)
        if cond_scores.requires_grad:
            dq = b * (gb - sum_b)
            _acc(cond_scores, np.where(shifted > _COND_CLAMP, 0.0, dq))

    return _record(out, (text_scores, cond_scores), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layernorm affine shapes {gain.data.shape}/{bias.data.shape} do not match last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bw(g):
        if bias.requires_grad:
            _acc(bias, g.reshape(-1, d).sum(axis=0))
        if gain.requires_grad:
            _acc(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            _acc(x, (gy - m1 - xhat * m2) * inv)

    return _record(out, (x, gain, bias), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table`; backward scatter-adds into the table gradient."""
    ids = list(ids)
    v, d = table.data.shape
    for i in ids:
        if not 0 <= i < v:
            raise IndexError(f"embedding id {i} out of range [0, {v})")
    idx = np.asarray(ids, dtype=np.int64)
    if ids:
        out = Tensor(table.data[idx])
    else:
        out = Tensor(np.zeros((0, d), dtype=table.dtype))

    def bw(g):
        if table.requires_grad and len(ids):
            if table._grad is None:
                table._grad = np.zeros_like(table.data)
            np.add.at(table._grad, idx, g)

    return _record(out, (table,), bw)


def masked_cross_entropy(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean next-token NLL over positions with mask 1.

    Masked positions contribute exactly zero to both the value and the
    gradient; their target entries are never read.
    """
    t = np.asarray(list(targets), dtype=np.int64)
    mk = np.asarray(list(loss_mask))
    n, v = logits.data.shape
    if t.shape[0] != n or mk.shape[0] != n:
        raise ShapeError(
            f"masked_cross_entropy lengths differ: logits {n} rows, {t.shape[0]} targets, {mk.shape[0]} mask"
        )
    sel = np.flatnonzero(mk)
    if sel.size == 0:
        raise ValueError("empty loss: loss_mask selects no positions")
    if np.any(t[sel] < 0) or np.any(t[sel] >= v):
        raise IndexError("target id out of range at an unmasked position")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    zc = x - m
    lse = np.log(np.sum(np.exp(zc), axis=1)) + m[:, 0]
    nll = lse[sel] - x[sel, t[sel]]
    out = Tensor(np.asarray(nll.mean(), dtype=x.dtype))

    def bw(g):
        if logits.requires_grad:
            gl = np.zeros_like(x)
            probs = np.exp(zc[sel] - (lse[sel] - m[sel, 0])[:, None])
            probs[np.arange(sel.size), t[sel]] -= 1.0
            gl[sel] = probs * (g / sel.size)
            _acc(logits, gl)

    return _record(out, (logits,), bw)


# ---------------------------------------------------------------------------
# convolution support

_IM2COL_CACHE: dict[tuple, np.ndarray] = {}


def _im2col_idx(c, h, w, k, s):
    key = (c, h, w, k, s)
    idx = _IM2COL_CACHE.get(key)
    if idx is None:
        ho = (h - k) // s + 1
        wo = (w - k) // s + 1
        ci = np.arange(c)[:, None, None]
        ky = np.arange(k)[None, :, None]
        kx = np.arange(k)[None, None, :]
        patch = (ci * h * w + ky * w + kx).reshape(1, -1)
        oy = (np.arange(ho) * s)[:, None]
        ox = (np.arange(wo) * s)[None, :]
        origin = (oy * w + ox).reshape(-1, 1)
        idx = origin + patch  # (ho*wo, c*k*k)
        _IM2COL_CACHE[key] = idx
    return idx


def im2col(x: Tensor, ksize: int, stride: int) -> Tensor:
    """Unfold a (C, H, W) map into (H'*W', C*k*k) patches for conv-as-matmul."""
    if x.data.ndim != 3:
        raise ShapeError(f"im2col expects (C, H, W), got {x.data.shape}")
    c, h, w = x.data.shape
    if h < ksize or w < ksize:
        raise ShapeError(f"im2col kernel {ksize} larger than input {x.data.shape}")
    idx = _im2col_idx(c, h, w, ksize, stride)
    flat = x.data.reshape(-1)
    out = Tensor(flat[idx])

    def bw(g):
        if x.requires_grad:
            gf = np.zeros(c * h * w, dtype=x.data.dtype)
            np.add.at(gf, idx, g)
            _acc(x, gf.reshape(c, h, w))

    return _record(out, (x,), bw)
