"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every primitive records itself on a thread-local tape during the forward
pass; ``backward`` replays the tape in exact reverse execution order and
accumulates gradients additively into ``.grad`` buffers. All math is done
in 64-bit so finite-difference checks resolve cleanly.

The engine is deliberately small: dense matmul (2-D and stacked 3-D),
1-D convolution, the usual elementwise nonlinearities, layer norm,
softmax / log-softmax, embedding lookup, dropout and the two losses the
models need (cross entropy, mean squared error). CTC lives in
``neuroseq.ctc`` as its own primitive.
"""

from __future__ import annotations

import threading

import numpy as np

GELU_TANH_COEF = 0.7978845608028654  # sqrt(2/pi)
GELU_CUBIC_COEF = 0.044715


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class EmptyLossError(ValueError):
    """Raised when a loss has no contributing positions."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN/Inf is detected where finite values are required."""


class _State(threading.local):
    def __init__(self):
        self.tape = []
        self.grad_enabled = True


_state = _State()


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus an optional gradient buffer.

    Tensors created by recorded primitives carry a backward closure; leaf
    tensors carry one only implicitly through ``requires_grad``. Data is
    treated as immutable once it has been consumed by an op.
    """

    __slots__ = ("data", "grad", "requires_grad", "_rec", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._rec = requires_grad  # participates in the recorded graph
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def assert_finite(self, what: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in {what}")
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, rec={self._rec})"

    # operator sugar used throughout the models
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """Trainable tensor with a unique hierarchical name and Adam moments."""

    __slots__ = ("name", "m", "v")

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = None  # first moment, allocated by the optimizer
        self.v = None  # second moment

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.data.shape)})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    if not t._rec:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out: Tensor, inputs, backward):
    """Put ``out`` on the tape if grad mode is on and any input is live."""
    if _state.grad_enabled and any(i._rec for i in inputs):
        out._rec = True
        out._backward = backward
        _state.tape.append(out)
    return out


def tape_size() -> int:
    return len(_state.tape)


def backward(loss: Tensor):
    """Run reverse-mode accumulation from a scalar loss and clear the tape."""
    if loss.data.shape != ():
        raise DimensionError(f"backward needs a scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_state.tape):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
    clear_tape()


def clear_tape():
    _state.tape = []


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def bw(g):
        _accum(a, g * c)

    return _record(out, (a,), bw)


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)

    def bw(g):
        _accum(a, 2.0 * a.data * g)

    return _record(out, (a,), bw)


def sum_(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def bw(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _record(out, (a,), bw)


def mean_(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())

    def bw(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _record(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        _accum(a, g.reshape(old))

    return _record(out, (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))

    def bw(g):
        _accum(a, g.transpose(inv))

    return _record(out, (a,), bw)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accum(p, piece)

    return _record(out, tuple(parts), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[start:stop])

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[start:stop] = g
        _accum(a, buf)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (exact constants pinned by tests)."""
    x = a.data
    u = GELU_TANH_COEF * (x + GELU_CUBIC_COEF * x**3)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t))

    def bw(g):
        du = GELU_TANH_COEF * (1.0 + 3.0 * GELU_CUBIC_COEF * x**2)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du))

    return _record(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)

    def bw(g):
        _accum(a, g * s * (1.0 - s))

    return _record(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t)

    def bw(g):
        _accum(a, g * (1.0 - t**2))

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# dense algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def bw(g):
        _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _record(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map y = x @ w + b for 2-D x (one tape node)."""
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise DimensionError(
            f"linear: incompatible shapes {x.data.shape} x {w.data.shape}")
    out = Tensor(x.data @ w.data + b.data)

    def bw(g):
        if x._rec:
            _accum(x, g @ w.data.T)
        if w._rec:
            _accum(w, x.data.T @ g)
        if b._rec:
            _accum(b, g.sum(axis=0))

    return _record(out, (x, w, b), bw)


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """1-D cross-correlation over time.

    ``x`` is (T, C_in), ``kernels`` is (C_out, C_in, K). "same" padding is
    symmetric zeros with the extra sample on the right and gives
    T' = ceil(T / stride); "valid" gives T' = floor((T - K) / stride) + 1.
    """
    if x.data.ndim != 2 or kernels.data.ndim != 3:
        raise DimensionError(
            f"conv1d: expected (T,C_in) and (C_out,C_in,K), got {x.data.shape} "
            f"and {kernels.data.shape}"
        )
    T, c_in = x.data.shape
    c_out, kc_in, K = kernels.data.shape
    if T == 0:
        raise DimensionError("conv1d: empty input")
    if kc_in != c_in:
        raise DimensionError(f"conv1d: channel mismatch {c_in} vs {kc_in}")
    if stride < 1:
        raise DimensionError(f"conv1d: stride must be >= 1, got {stride}")

    if padding == "same":
        t_out = -(-T // stride)  # ceil
        pad_total = max(0, (t_out - 1) * stride + K - T)
        left = pad_total // 2
        right = pad_total - left
    elif padding == "valid":
        if T < K:
            raise DimensionError(f"conv1d: input length {T} shorter than kernel {K}")
        t_out = (T - K) // stride + 1
        left = right = 0
    else:
        raise ValueError(f"conv1d: unknown padding {padding!r}")

    xp = np.pad(x.data, ((left, right), (0, 0)))
    starts = np.arange(t_out) * stride
    idx = starts[:, None] + np.arange(K)[None, :]
    patches = xp[idx]  # (t_out, K, c_in)
    pmat = patches.reshape(t_out, K * c_in)
    wmat = kernels.data.transpose(2, 1, 0).reshape(K * c_in, c_out)
    out = Tensor(pmat @ wmat)

    def bw(g):
        if kernels._rec:
            _accum(kernels, (pmat.T @ g).reshape(K, c_in, c_out).transpose(2, 1, 0))
        if x._rec:
            dp = (g @ wmat.T).reshape(t_out, K, c_in)
            dxp = np.zeros_like(xp)
            np.add.at(dxp, idx, dp)
            _accum(x, dxp[left:left + T])

    return _record(out, (x, kernels), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, s * (g - dot))

    return _record(out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    ls = z - lse
    out = Tensor(ls)

    def bw(g):
        _accum(a, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

    return _record(out, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias must be ({d},), got {gain.data.shape} "
            f"and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bw(g):
        if gain._rec:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias._rec:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x._rec:
            dxhat = g * gain.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            _accum(x, dx)

    return _record(out, (x, gain, bias), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def bw(g):
        if table._rec:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, g)
            _accum(table, buf)

    return _record(out, (table,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a caller-seeded mask; identity when p == 0."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(np.float64) / (1.0 - p)
    out = Tensor(x.data * keep)

    def bw(g):
        _accum(x, g * keep)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over non-ignored positions."""
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows vs targets {targets.shape}")
    valid = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    if not valid.any():
        raise EmptyLossError("cross_entropy: all positions ignored")
    checked = targets[valid]
    if checked.min() < 0 or checked.max() >= v:
        raise ValueError(f"cross_entropy: target id out of range [0,{v})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    picked = np.where(valid, logp[rows, np.where(valid, targets, 0)], 0.0)
    n_valid = int(valid.sum())
    out = Tensor(-picked.sum() / n_valid)

    def bw(g):
        p = np.exp(logp)
        p[rows[valid], targets[valid]] -= 1.0
        p[~valid] = 0.0
        _accum(logits, p * (float(g) / n_valid))

    return _record(out, (logits,), bw)


def mse(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=np.float64)
    if pred.data.shape != t.shape:
        raise DimensionError(f"mse: shape {pred.data.shape} vs target {t.shape}")
    diff = pred.data - t
    out = Tensor((diff**2).mean())

    def bw(g):
        _accum(pred, (2.0 / diff.size) * diff * float(g))

    return _record(out, (pred,), bw)
