"""Dense NCHW tensor core with reverse-mode automatic differentiation.

Tensors carry float32 data by default ("standard" precision); gradient
checks build float64 tensors ("extended" precision). A forward pass
records backward closures on the output tensors; calling ``backward()``
on a scalar loss walks the recorded graph once in reverse topological
order and accumulates gradients on every leaf with ``requires_grad``.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SIGMOID_EPS = 1e-6
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = True
_debug_checks = False


class StaleTapeError(RuntimeError):
    """Raised when backward is invoked twice on the same recorded graph."""


class DegenerateVarianceError(ValueError):
    """Raised when batch statistics are requested over fewer than 2 elements."""


class no_grad:
    """Context manager that disables tape recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def set_debug_checks(on):
    """Enable/disable NaN/Inf checks after every forward op."""
    global _debug_checks
    _debug_checks = bool(on)


def _as_array(data, dtype=None):
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self):
        """Reverse-mode pass from a scalar; populates .grad on reachable leaves."""
        if self.size != 1:
            raise ValueError("backward requires a scalar tensor")
        if self._consumed:
            raise StaleTapeError("backward already ran on this graph")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
            node._consumed = True
        return self


def _wants_grad(*tensors):
    return _grad_enabled and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors
    )


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _make(data, parents, backward_fn):
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in forward output")
    out = Tensor(data)
    if backward_fn is not None and _wants_grad(*parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# -- elementwise and structural ops ---------------------------------------

def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _coerce(b, a)
    data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def mul(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _coerce(b, a)
    data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd)


def power(a, exponent):
    data = a.data ** exponent

    def bwd(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _make(data, (a,), bwd)


def log(a):
    data = np.log(a.data)

    def bwd(g):
        _accumulate(a, g / a.data)

    return _make(data, (a,), bwd)


def tensor_sum(a):
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def bwd(g):
        _accumulate(a, np.broadcast_to(g, a.shape).astype(a.dtype))

    return _make(data, (a,), bwd)


def tensor_mean(a):
    n = a.size
    data = np.asarray(a.data.mean(), dtype=a.dtype)

    def bwd(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape).astype(a.dtype))

    return _make(data, (a,), bwd)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(data, (a,), bwd)


def relu(a):
    data = np.maximum(a.data, 0)

    def bwd(g):
        # subgradient at exactly 0 is 0
        _accumulate(a, g * (a.data > 0))

    return _make(data, (a,), bwd)


def sigmoid(a):
    p = 1.0 / (1.0 + np.exp(-a.data))
    p = np.clip(p, SIGMOID_EPS, 1.0 - SIGMOID_EPS)

    def bwd(g):
        _accumulate(a, g * p * (1.0 - p))

    return _make(p, (a,), bwd)


def softmax_channels(a):
    """Per-pixel softmax over axis 1 of an [N,C,H,W] tensor."""
    if a.data.ndim != 4 or a.shape[1] < 1:
        raise ValueError("softmax_channels expects an [N,C,H,W] tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        _accumulate(a, s * (g - dot))

    return _make(s, (a,), bwd)


# -- convolution -----------------------------------------------------------

def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols, x_shape, k, stride, pad, ho, wo):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, i, j]
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


def conv2d(x, weight, bias, stride=1, pad=0):
    """2D convolution via the patch-matrix (im2col) route.

    x: [N,Cin,H,W], weight: [Cout,Cin,k,k], bias: [Cout].
    """
    n, cin, h, w = x.shape
    cout, cin_w, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd side, got {k}x{k2}")
    if cin != cin_w:
        raise ValueError(f"input has {cin} channels, weight expects {cin_w}")
    if stride < 1 or pad < 0 or h + 2 * pad < k or w + 2 * pad < k:
        raise ValueError("invalid stride/pad for input size")

    cols, ho, wo = _im2col(x.data, k, stride, pad)
    w2d = weight.data.reshape(cout, cin * k * k)
    out = np.einsum("ok,nkp->nop", w2d, cols, optimize=True)
    out += bias.data.reshape(1, cout, 1)
    out = out.reshape(n, cout, ho, wo)

    def bwd(g):
        g2d = g.reshape(n, cout, ho * wo)
        if weight.requires_grad:
            dw = np.einsum("nop,nkp->ok", g2d, cols, optimize=True)
            _accumulate(weight, dw.reshape(weight.shape))
        if bias.requires_grad:
            _accumulate(bias, g2d.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.einsum("ok,nop->nkp", w2d, g2d, optimize=True)
            _accumulate(x, _col2im(dcols, x.shape, k, stride, pad, ho, wo))

    return _make(out, (x, weight, bias), bwd)


# -- pooling / resizing ----------------------------------------------------

def max_pool2d_3x3_same(x):
    """3x3 max pool with -inf edge padding; shape preserved.

    Doubles as the peak-finding primitive for heatmap decoding.
    """
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)),
                constant_values=-np.inf)
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    flat = win.reshape(n, c, h, w, 9)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(xp)
        di, dj = np.unravel_index(arg, (3, 3))
        ni, ci, yi, xi = np.indices((n, c, h, w))
        np.add.at(dx, (ni, ci, yi + di, xi + dj), g)
        _accumulate(x, dx[:, :, 1:-1, 1:-1])

    return _make(out, (x,), bwd)


def _bilinear_axis(in_size, out_size):
    # half-pixel centers, align-corners=false
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_upsample(x, out_h, out_w):
    """Differentiable bilinear resize with half-pixel sampling."""
    n, c, h, w = x.shape
    if out_h < h or out_w < w or out_h <= 0 or out_w <= 0:
        raise ValueError("output size must be >= input size and positive")
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    fy = fy.astype(x.dtype)[None, None, :, None]
    fx = fx.astype(x.dtype)[None, None, None, :]

    d = x.data
    top = d[:, :, y0][:, :, :, x0] * (1 - fx) + d[:, :, y0][:, :, :, x1] * fx
    bot = d[:, :, y1][:, :, :, x0] * (1 - fx) + d[:, :, y1][:, :, :, x1] * fx
    out = top * (1 - fy) + bot * fy

    def bwd(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(d)
        gy0 = g * (1 - fy)
        gy1 = g * fy
        yy0 = y0[:, None] + np.zeros_like(x0)[None, :]
        yy1 = y1[:, None] + np.zeros_like(x0)[None, :]
        xx0 = np.zeros_like(y0)[:, None] + x0[None, :]
        xx1 = np.zeros_like(y0)[:, None] + x1[None, :]
        np.add.at(dx, (slice(None), slice(None), yy0, xx0), gy0 * (1 - fx))
        np.add.at(dx, (slice(None), slice(None), yy0, xx1), gy0 * fx)
        np.add.at(dx, (slice(None), slice(None), yy1, xx0), gy1 * (1 - fx))
        np.add.at(dx, (slice(None), slice(None), yy1, xx1), gy1 * fx)
        _accumulate(x, dx)

    return _make(out, (x,), bwd)


# -- batch normalization -----------------------------------------------------

class RunningStats:
    """Per-channel running mean/variance for batch norm eval mode."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self):
        out = RunningStats(len(self.mean), self.mean.dtype)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batch_norm2d(x, gamma, beta, state, mode="train",
                 momentum=BN_MOMENTUM, eps=BN_EPS):
    """Channel-wise batch normalization over (N,H,W).

    Train mode uses batch statistics and updates ``state`` by EMA;
    eval mode normalizes with the running statistics.
    """
    n, c, h, w = x.shape
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise DegenerateVarianceError(
                "batch norm needs at least 2 elements per channel in train mode")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.mean = (1 - momentum) * state.mean + momentum * mean
        state.var = (1 - momentum) * state.var + momentum * var
    elif mode == "eval":
        mean = state.mean
        var = state.var
    else:
        raise ValueError(f"unknown mode {mode!r}")

    mean4 = mean.reshape(1, c, 1, 1)
    ivar = 1.0 / np.sqrt(var + eps)
    ivar4 = ivar.reshape(1, c, 1, 1)
    xhat = (x.data - mean4) * ivar4
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(1, c, 1, 1)
            if mode == "eval":
                _accumulate(x, gxhat * ivar4)
            else:
                m = n * h * w
                s1 = gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                _accumulate(x, ivar4 / m * (m * gxhat - s1 - xhat * s2))

    return _make(out, (x, gamma, beta), bwd)


def channel_affine(x, gamma, beta):
    """Per-channel affine y = gamma*x + beta (batch-size-1 norm substitute)."""
    c = x.shape[1]
    g4 = reshape(gamma, (1, c, 1, 1))
    b4 = reshape(beta, (1, c, 1, 1))
    return add(mul(x, g4), b4)


# -- gradient checking --------------------------------------------------------

def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the tensor ``x`` to a scalar Tensor; ``x`` should be float64
    for the documented tolerances to be reachable.
    """
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if y.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(y.data):
        raise FloatingPointError("function value is not finite")
    y.backward()
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            xp = orig + eps
            xm = orig - eps
            flat[i] = xp
            fp = float(f(x).data)
            flat[i] = xm
            fm = float(f(x).data)
            flat[i] = orig
            # divide by the representable step so e.g. f=sum is exact
            nflat[i] = (fp - fm) / (xp - xm)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def logit(p):
    return math.log(p / (1.0 - p))
