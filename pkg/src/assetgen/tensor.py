"""Dense-tensor engine with tape-based reverse-mode autodiff.

Define-by-run: every op that sees a grad-requiring input records a backward
closure on the produced tensor; ``backward(loss)`` replays the graph in
reverse topological order exactly once and frees it. Data lives in row-major
numpy arrays, float32 by default (``using_dtype`` switches to float64 for
finite-difference oracles in tests).

Thread model: tensors are immutable after construction except for in-place
parameter updates done by the optimizer between steps. Graphs built on
disjoint tensors are independent, so separate threads may build and consume
separate tapes; a single tape is single-threaded.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_DEFAULT_DTYPE = np.float32
_FINITE_CHECKS = True
_state = threading.local()


def current_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (float64 for gradient oracles)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dtype
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the NaN/Inf assertion run after every forward op.

    On by default; benchmark/training runs may disable it. Returns the
    previous setting.
    """
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording (inference mode)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A dense array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _check_finite(out: np.ndarray, op: str):
    if _FINITE_CHECKS and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._consumed = False
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    # accumulation always allocates, so storing the incoming array is safe:
    # no backward closure mutates the gradients it emits
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd, "add")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bwd, "neg")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * bd, ad.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * ad, bd.shape))

    return _make(out, (a, b), bwd, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; both operands ndim >= 2."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            bt = bd.swapaxes(-1, -2)
            if bd.ndim > 2:
                bt = np.ascontiguousarray(bt)
            _accumulate(a, _unbroadcast(g @ bt, ad.shape))
        if b.requires_grad:
            at = ad.swapaxes(-1, -2)
            if ad.ndim > 2:
                at = np.ascontiguousarray(at)
            _accumulate(b, _unbroadcast(at @ g, bd.shape))

    return _make(out, (a, b), bwd, "matmul")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    out = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(old))

    return _make(out, (a,), bwd, "reshape")


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    # contiguous output: downstream matmuls are ~2x faster than on views
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        _accumulate(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(out, (a,), bwd, "transpose")


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(idx)])

    return _make(out, tuple(parts), bwd, "concat")


def take_rows(a, idx) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]
    shape = a.data.shape

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros(shape, dtype=g.dtype)
            np.add.at(acc, idx, g)
            _accumulate(a, acc)

    return _make(out, (a,), bwd, "take_rows")


def slice_lastdim(a, start: int, size: int) -> Tensor:
    a = _as_tensor(a)
    out = a.data[..., start : start + size]
    full = a.data.shape

    def bwd(g):
        acc = np.zeros(full, dtype=g.dtype)
        acc[..., start : start + size] = g
        _accumulate(a, acc)

    return _make(np.ascontiguousarray(out), (a,), bwd, "slice_lastdim")


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum())

    def bwd(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _make(out, (a,), bwd, "sum_all")


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean())

    def bwd(g):
        _accumulate(a, np.broadcast_to(g / n, a.data.shape))

    return _make(out, (a,), bwd, "mean_all")


def silu(a) -> Tensor:
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bwd(g):
        _accumulate(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out, (a,), bwd, "silu")


def softmax_lastdim(x, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks positions to KEEP.

    Positions where the (broadcastable) boolean mask is False get -inf logits
    and therefore exactly zero probability, excluded from the normalizer. A
    row with every entry masked is an error.
    """
    x = _as_tensor(x)
    if mask is None:
        logits = x.data
        keep = None
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
        if not keep.any(axis=-1).all():
            raise ValueError("softmax_lastdim: a row has every entry masked")
        logits = np.where(keep, x.data, -np.inf)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)  # exp(-inf) = exact 0 at masked positions
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (p * g).sum(axis=-1, keepdims=True)
        _accumulate(x, p * (g - dot))

    out = _make(p, (x,), bwd, "softmax_lastdim")
    return out


def masked_attention(q, k, v, allowed: np.ndarray | None = None) -> Tensor:
    """Fused softmax(q @ k^T) @ v over heads: (H, L, dh) inputs.

    Equivalent to matmul + softmax_lastdim + matmul but evaluated with
    per-head BLAS calls and in-place softmax; one tape node instead of four.
    ``allowed`` is an (L, L) keep-mask shared by all heads; blocked entries
    get exactly zero probability and propagate exactly zero gradient.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    H, L, dh = q.data.shape
    dtype = q.data.dtype
    if allowed is not None:
        if not allowed.any(axis=-1).all():
            raise ValueError("masked_attention: a query row has every key masked")
        bias = np.where(allowed, dtype.type(0), dtype.type(-np.inf))
    scores = np.empty((H, L, L), dtype=dtype)
    for h in range(H):
        np.matmul(q.data[h], k.data[h].T, out=scores[h])
    if allowed is not None:
        scores += bias[None]
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    probs = scores  # in-place softmax; masked entries are exact zeros
    out = np.empty((H, L, dh), dtype=dtype)
    for h in range(H):
        np.matmul(probs[h], v.data[h], out=out[h])

    def bwd(g):
        gp = np.empty_like(probs)
        for h in range(H):
            np.matmul(g[h], v.data[h].T, out=gp[h])
        if v.requires_grad:
            gv = np.empty_like(v.data)
            for h in range(H):
                np.matmul(probs[h].T, g[h], out=gv[h])
            _accumulate(v, gv)
        gp -= (probs * gp).sum(axis=-1, keepdims=True)
        gp *= probs  # ds: zero wherever probs is zero
        if q.requires_grad:
            gq = np.empty_like(q.data)
            for h in range(H):
                np.matmul(gp[h], k.data[h], out=gq[h])
            _accumulate(q, gq)
        if k.requires_grad:
            gk = np.empty_like(k.data)
            for h in range(H):
                np.matmul(gp[h].T, q.data[h], out=gk[h])
            _accumulate(k, gk)

    return _make(out, (q, k, v), bwd, "masked_attention")


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, then per-channel gain."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    if gain.data.shape != (x.data.shape[-1],):
        raise ValueError(f"rmsnorm gain extent {gain.data.shape} != last dim {x.data.shape[-1]}")
    n = x.data.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    out = normed * gain.data

    def bwd(g):
        if x.requires_grad:
            gx_hat = g * gain.data
            dot = (x.data * gx_hat).sum(axis=-1, keepdims=True)
            _accumulate(x, inv * (gx_hat - x.data * (inv * inv / n) * dot))
        if gain.requires_grad:
            _accumulate(gain, (g * normed).reshape(-1, n).sum(axis=0))

    return _make(out, (x, gain), bwd, "rmsnorm")


def apply_rotary(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive (even, odd) feature pairs by precomputed angles.

    ``cos``/``sin`` have shape broadcastable to x[..., ::2] and carry no
    gradient (they are functions of integer positions). The rotation is
    orthogonal per position, so equal positions preserve inner products and
    shifting all positions by a constant leaves pairwise products unchanged.
    """
    x = _as_tensor(x)
    if x.data.shape[-1] % 2 != 0:
        raise ValueError("apply_rotary needs an even last dim")
    cos = np.asarray(cos, dtype=x.data.dtype)
    sin = np.asarray(sin, dtype=x.data.dtype)
    x0 = x.data[..., 0::2]
    x1 = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def bwd(g):
        g0 = g[..., 0::2]
        g1 = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        _accumulate(x, gx)

    return _make(out, (x,), bwd, "apply_rotary")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor):
    """Run reverse-mode accumulation from a scalar loss.

    Visits each recorded node exactly once in reverse topological order,
    writes ``.grad`` on every grad-requiring tensor reached, then frees the
    tape. A second call on the same consumed loss raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise RuntimeError("backward called twice on a consumed tape")
    if not loss.requires_grad:
        raise ValueError("loss was not produced through tracked operations")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p._backward_fn is not None:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
        node._backward_fn = None
        node._parents = ()
        if node is not loss:
            node.grad = None  # intermediates are consumed; leaves keep theirs
    loss._consumed = True
