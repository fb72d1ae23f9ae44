"""Minimal reverse-mode autodiff on numpy arrays.

Covers exactly the operations needed to train small sensor-window
classifiers and an additive-trigger autoencoder: dense and convolutional
layers, an LSTM cell, pointwise nonlinearities, reductions, and the
classification / perturbation losses. Training math runs in float32;
building the same graph from float64 arrays keeps everything in float64,
which is what the finite-difference checks use.

Every forward op validates its output for NaN/Inf and raises
NonFiniteOutput instead of propagating silent garbage.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeMismatch(ValueError):
    """Operand shapes do not conform to the op's shape rule."""


class NonFiniteOutput(ArithmeticError):
    """A forward op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar backward, reuse, missing grad)."""


class Tensor:
    """N-d float array plus optional gradient and graph bookkeeping.

    Leaf tensors created with requires_grad=True get a zero-initialized
    grad buffer so untouched leaves report an exact zero gradient. Op
    outputs allocate their grad lazily during backward().
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_used")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in _FLOAT_DTYPES:
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._used = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteOutput(f"{op}: produced non-finite values")


def _from_op(op: str, data: np.ndarray, parents, backward) -> Tensor:
    _check_finite(op, data)
    t = Tensor.__new__(Tensor)
    t.data = data
    rg = any(p.requires_grad for p in parents)
    t.requires_grad = rg
    t.grad = None
    # the op is recorded only when some input participates in the graph
    t._parents = tuple(parents) if rg else ()
    t._backward = backward if rg else None
    t._op = op
    t._used = False
    return t


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _from_op("add", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op("mul", out, (a, b), bw)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar without upcasting the dtype."""
    a = _as_tensor(a)
    return mul(a, Tensor(np.asarray(c, dtype=a.data.dtype)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _from_op("matmul", out, (a, b), bw)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def bw(g):
        _accum(x, g * (out > 0))

    return _from_op("relu", out, (x,), bw)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        _accum(x, g * (1 - out * out))

    return _from_op("tanh", out, (x,), bw)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1 / (1 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1 + e)

    def bw(g):
        _accum(x, g * out * (1 - out))

    return _from_op("sigmoid", out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, (g - dot) * out)

    return _from_op("softmax", out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and losses


def sum_(x) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bw(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _from_op("sum", out, (x,), bw)


def mean(x) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    n = x.data.size

    def bw(g):
        _accum(x, np.broadcast_to(g / n, x.data.shape))

    return _from_op("mean", out, (x,), bw)


def l2_norm_sq(x) -> Tensor:
    """Sum of squared entries; the perturbation penalty. Gradient is 2x."""
    x = _as_tensor(x)
    out = np.asarray((x.data * x.data).sum(), dtype=x.data.dtype)

    def bw(g):
        _accum(x, g * 2 * x.data)

    return _from_op("l2_norm_sq", out, (x,), bw)


def mse(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeMismatch(f"mse: shapes {pred.data.shape} and {target.data.shape} differ")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)
    n = pred.data.size

    def bw(g):
        gp = g * 2 * diff / n
        _accum(pred, gp)
        _accum(target, -gp)

    return _from_op("mse", out, (pred, target), bw)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log softmax probability of the given class indices."""
    logits = _as_tensor(logits)
    y = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"cross_entropy: logits must be 2-d, got {logits.data.shape}")
    n, k = logits.data.shape
    if y.shape != (n,):
        raise ShapeMismatch(f"cross_entropy: labels shape {y.shape} does not match batch {n}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = np.asarray(-logp[np.arange(n), y].mean(), dtype=logits.data.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1
        _accum(logits, p * (g / n))

    return _from_op("cross_entropy", out, (logits,), bw)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {x.data.shape} as {tuple(shape)}")

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return _from_op("reshape", out, (x,), bw)


def slice_(x, key) -> Tensor:
    x = _as_tensor(x)
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        _accum(x, gx)

    return _from_op("slice", out, (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: shapes {[t.data.shape for t in ts]} do not align on axis {axis}")
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _from_op("concat", out, tuple(ts), bw)


# ---------------------------------------------------------------------------
# convolutions


def _pad_pair(padding, k: int):
    if padding == "same":
        if k % 2 == 0:
            raise ValueError("conv: 'same' padding requires an odd kernel size")
        return k // 2
    p = int(padding)
    if p < 0:
        raise ValueError("conv: padding must be nonnegative")
    return p


def conv2d(x, w, b=None, stride=1, padding="same") -> Tensor:
    """2-d convolution, NCHW layout, weights (out, in, kh, kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.data.shape} and kernel {w.data.shape} do not conform")
    bn, cin, h, wd = x.data.shape
    cout, _, kh, kw = w.data.shape
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if sh < 1 or sw < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if padding == "same":
        ph, pw = _pad_pair("same", kh), _pad_pair("same", kw)
    else:
        ph, pw = (padding, padding) if isinstance(padding, int) else padding
        ph, pw = _pad_pair(ph, kh), _pad_pair(pw, kw)
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ShapeMismatch(f"conv2d: kernel {(kh, kw)} larger than padded input {(h + 2 * ph, wd + 2 * pw)}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    oh, ow = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bn * oh * ow, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(bn, oh, ow, cout).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (cout,):
            raise ShapeMismatch(f"conv2d: bias {b.data.shape} does not match {cout} output channels")
        out = out + b.data.reshape(1, cout, 1, 1)
        parents.append(b)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bn * oh * ow, cout)
        if w.requires_grad:
            _accum(w, (gmat.T @ cols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(bn, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + oh * sh:sh, j:j + ow * sw:sw] += gcols[:, :, :, :, i, j]
            gx = gxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else gxp
            _accum(x, gx)

    out = np.ascontiguousarray(out)
    return _from_op("conv2d", out, tuple(parents), bw)


def conv1d(x, w, b=None, stride=1, padding="same") -> Tensor:
    """1-d convolution over the last axis, built on conv2d; x is (n, c, t)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeMismatch(f"conv1d: input {x.data.shape} and kernel {w.data.shape} must be 3-d")
    bn, cin, t = x.data.shape
    cout, _, k = w.data.shape
    x4 = reshape(x, (bn, cin, t, 1))
    w4 = reshape(w, (cout, w.data.shape[1], k, 1))
    pad = padding if padding == "same" else (padding, 0)
    y = conv2d(x4, w4, b, stride=(stride, 1), padding=pad)
    return reshape(y, y.data.shape[:3])


def lstm_step(x_t, h_prev, c_prev, w_ih, w_hh, b):
    """One LSTM cell step; gate layout along the 4H axis is (i, f, g, o)."""
    hdim = h_prev.data.shape[1] if isinstance(h_prev, Tensor) else h_prev.shape[1]
    z = add(add(matmul(x_t, w_ih), matmul(h_prev, w_hh)), b)
    i = sigmoid(slice_(z, (slice(None), slice(0, hdim))))
    f = sigmoid(slice_(z, (slice(None), slice(hdim, 2 * hdim))))
    g = tanh(slice_(z, (slice(None), slice(2 * hdim, 3 * hdim))))
    o = sigmoid(slice_(z, (slice(None), slice(3 * hdim, 4 * hdim))))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0. Only used at training time."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout: probability {p} outside [0, 1)")
    if p == 0:
        return _as_tensor(x)
    x = _as_tensor(x)
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1 - p)
    return mul(x, Tensor(mask))


# ---------------------------------------------------------------------------
# graph execution

OP_TABLE = {
    "matmul": matmul,
    "conv1d": conv1d,
    "conv2d": conv2d,
    "add": add,
    "mul": mul,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "mean": mean,
    "sum": sum_,
    "l2_norm_sq": l2_norm_sq,
    "mse": mse,
    "cross_entropy": cross_entropy,
    "lstm_step": lstm_step,
    "slice": slice_,
    "reshape": reshape,
    "concat": concat,
}


def forward_op(kind: str, *inputs, **attrs):
    """Dispatch an op by name; the uniform entry point used by the checks."""
    if kind not in OP_TABLE:
        raise ValueError(f"unknown op kind '{kind}'")
    return OP_TABLE[kind](*inputs, **attrs)


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss; populates leaf gradients.

    Each graph may be swept once; rerun the forward pass to backprop again.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {tuple(loss.data.shape)}")
    if loss._used:
        raise GraphError("backward: graph already consumed; re-run the forward pass")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any requires_grad tensor")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:  # iterative DFS; unrolled LSTM graphs exceed recursion limits
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._used and node._parents:
            raise GraphError("backward: subgraph already consumed; re-run the forward pass")
        if node._backward is not None:
            node._backward(node.grad)
            node._backward = None  # free closures, forbid partial re-sweeps
        node._used = True


def zero_grads(params):
    for p in params:
        p.zero_grad()


class Adam:
    """Bias-corrected Adam; grads are zeroed after each applied step."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise GraphError("adam: parameter is missing its gradient")
        self.t += 1
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad.fill(0)


def numeric_gradient(fn, arrays, eps: float = 1e-4):
    """Central finite differences of a scalar-valued fn w.r.t. float64 arrays.

    fn takes no arguments and must re-read the arrays, which are perturbed
    in place one element at a time.
    """
    grads = []
    for a in arrays:
        if a.dtype != np.float64:
            raise ValueError("numeric_gradient: arrays must be float64")
        g = np.zeros_like(a)
        flat, gf = a.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn()
            flat[i] = orig - eps
            lo = fn()
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads
