"""Dense tensors with recorded reverse-mode gradients.

Deliberately small: only the operations the quantized-denoiser stack needs
(linear, conv2d, elementwise arithmetic with numpy broadcasting, SiLU,
channel concat, nearest-neighbour upsampling, full reductions). Arrays are
real32 by default; the gradient-check harness runs in real64.

Graphs are recorded on the fly: every operation whose inputs require
gradients returns a node holding its parents and a closure that maps the
output gradient to parent gradients. Subgraphs that cannot reach a trainable
:class:`Param` carry no bookkeeping at all, so inference runs at plain numpy
speed.
"""

import hashlib

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    NumericError,
)

DTYPES = {"real32": np.float32, "real64": np.float64}
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Check every public op output for NaN/Inf. Tests rely on it; the training
# loop leaves it on (cost is small next to the matmuls) and maps failures to
# a divergence abort.
FINITE_CHECKS = True


def set_finite_checks(enabled):
    """Toggle NaN/Inf screening of op outputs. Returns the previous setting."""
    global FINITE_CHECKS
    previous = FINITE_CHECKS
    FINITE_CHECKS = bool(enabled)
    return previous


def _check_finite(data, op):
    if FINITE_CHECKS and not np.isfinite(data).all():
        raise NumericError(f"{op}: output contains non-finite values")


def _check_dtype(data, op):
    if data.dtype not in _FLOAT_DTYPES:
        raise ConfigurationError(f"{op}: dtype must be real32 or real64, got {data.dtype}")


def _same_dtype(a, b, op):
    if a.dtype != b.dtype:
        raise ConfigurationError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


class Tensor:
    """A value in a recorded computation.

    ``data`` is a numpy array. ``requires_grad`` marks whether the node can
    reach a trainable :class:`Param`; nodes that cannot are plain values with
    no parents.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_param")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, param=None):
        self.data = data
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self._param = param

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
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class Param:
    """A named leaf: value plus accumulated gradient plus a trainable flag.

    ``grad`` always has the shape and dtype of ``value``. Backward passes
    accumulate into it only while ``trainable`` is true; it is otherwise left
    untouched (all zeros unless someone wrote to it).
    """

    __slots__ = ("value", "grad", "trainable", "name")

    def __init__(self, value, trainable=True, name=""):
        value = np.asarray(value)
        _check_dtype(value, "Param")
        self.value = value
        self.grad = np.zeros_like(value)
        self.trainable = bool(trainable)
        self.name = name

    def tensor(self):
        """Fresh graph leaf viewing the current value."""
        if self.trainable:
            return Tensor(self.value, requires_grad=True, param=self)
        return Tensor(self.value)

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        state = "trainable" if self.trainable else "frozen"
        label = f" {self.name!r}" if self.name else ""
        return f"Param({state}{label}, shape={self.value.shape}, dtype={self.value.dtype})"


def constant(data, dtype=None):
    """Wrap an array as a gradient-free tensor."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return Tensor(arr)


def _coerce(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data, parents, backward, op):
    _check_finite(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    _same_dtype(a.data, b.data, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), backward, "add")


def sub(a, b):
    _same_dtype(a.data, b.data, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _node(out, (a, b), backward, "sub")


def mul(a, b):
    _same_dtype(a.data, b.data, "mul")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * b_data, a_data.shape),
            _unbroadcast(g * a_data, b_data.shape),
        )

    return _node(out, (a, b), backward, "mul")


def neg(a):
    def backward(g):
        return (-g,)

    return _node(-a.data, (a,), backward, "neg")


def silu(a):
    """x * sigmoid(x), the activation used throughout the denoiser."""
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = x * s

    def backward(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return _node(out, (a,), backward, "silu")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape):
    old = a.data.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _node(out, (a,), backward, "reshape")


def concat(a, b, axis=1):
    _same_dtype(a.data, b.data, "concat")
    out = np.concatenate([a.data, b.data], axis=axis)
    split = a.data.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return _node(out, (a, b), backward, "concat")


def upsample_nearest2x(a):
    """Duplicate each pixel into a 2x2 block (NCHW)."""
    if a.data.ndim != 4:
        raise DimensionError(f"upsample_nearest2x: need NCHW input, got shape {a.data.shape}")
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = a.data.shape

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _node(out, (a,), backward, "upsample_nearest2x")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def total(a):
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    shape = a.data.shape

    def backward(g):
        return (np.broadcast_to(g, shape),)

    return _node(out, (a,), backward, "total")


def mean(a):
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    shape = a.data.shape
    inv = 1.0 / n

    def backward(g):
        return (np.broadcast_to(g * np.asarray(inv, dtype=g.dtype), shape),)

    return _node(out, (a,), backward, "mean")


# ---------------------------------------------------------------------------
# linear / conv2d
# ---------------------------------------------------------------------------


def linear(x, w, b=None):
    """x @ w.T + b for x of shape (B, C_in) and w of shape (C_out, C_in)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimensionError(
            f"linear: need 2-d input and weight, got {x.data.shape} and {w.data.shape}"
        )
    if x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(
            f"linear: input {x.data.shape} incompatible with weight {w.data.shape}"
        )
    _same_dtype(x.data, w.data, "linear")
    x_data, w_data = x.data, w.data
    out = x_data @ w_data.T

    def backward(g):
        gx = g @ w_data if x.requires_grad else None
        gw = g.T @ x_data if w.requires_grad else None
        return gx, gw

    y = _node(out, (x, w), backward, "linear")
    if b is not None:
        if b.data.shape != (w.data.shape[0],):
            raise DimensionError(
                f"linear: bias shape {b.data.shape} does not match {w.data.shape[0]} outputs"
            )
        y = add(y, b)
    return y


def _conv_geometry(x_shape, w_shape, stride, padding):
    B, C_in, H, W = x_shape
    C_out, C_in_w, kh, kw = w_shape
    if C_in != C_in_w:
        raise DimensionError(f"conv2d: input channels {C_in} != weight channels {C_in_w}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square with odd extent, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: bad stride/padding {stride}/{padding}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(
            f"conv2d: non-positive output extent for input {x_shape} and kernel {kh}"
        )
    return B, C_in, H, W, C_out, kh, Ho, Wo


def _im2col(x, k, stride, padding):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(B * Ho * Wo, C * k * k), Ho, Wo


def _col2im(grad_cols, x_shape, k, stride, padding, Ho, Wo):
    B, C, H, W = x_shape
    gx = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=grad_cols.dtype)
    gc = grad_cols.reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 1, 2, 4, 5)
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gc[
                :, :, :, :, i, j
            ]
    if padding:
        gx = gx[:, :, padding : padding + H, padding : padding + W]
    return gx


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of NCHW input with OIHW kernels."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d: need 4-d input and weight, got {x.data.shape} and {w.data.shape}"
        )
    _same_dtype(x.data, w.data, "conv2d")
    B, C_in, H, W, C_out, k, Ho, Wo = _conv_geometry(x.data.shape, w.data.shape, stride, padding)
    cols, Ho, Wo = _im2col(x.data, k, stride, padding)
    w_mat = w.data.reshape(C_out, -1)
    out = (cols @ w_mat.T).reshape(B, Ho, Wo, C_out).transpose(0, 3, 1, 2)
    x_shape, w_shape = x.data.shape, w.data.shape

    def backward(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, C_out)
        gw = (g_mat.T @ cols).reshape(w_shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _col2im(g_mat @ w_mat, x_shape, k, stride, padding, Ho, Wo)
        return gx, gw

    y = _node(np.ascontiguousarray(out), (x, w), backward, "conv2d")
    if b is not None:
        if b.data.shape != (C_out,):
            raise DimensionError(
                f"conv2d: bias shape {b.data.shape} does not match {C_out} output channels"
            )
        y = add(y, reshape(b, (1, C_out, 1, 1)))
    return y


def conv2d_weight_grad(x, upstream, kernel_size, stride=1, padding=0):
    """dL/dW for a conv2d, given the input and the output gradient.

    Plain arrays in, plain array out; used for closed-form scale gradients.
    """
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    B, C_out, Ho, Wo = upstream.shape
    cols, Ho2, Wo2 = _im2col(x, kernel_size, stride, padding)
    if (Ho2, Wo2) != (Ho, Wo):
        raise DimensionError(
            f"conv2d_weight_grad: upstream {upstream.shape} inconsistent with input {x.shape}"
        )
    g_mat = np.ascontiguousarray(upstream.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, C_out)
    return (g_mat.T @ cols).reshape(C_out, x.shape[1], kernel_size, kernel_size)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(root):
    """Accumulate dRoot/dParam into every reachable trainable Param's grad."""
    if not isinstance(root, Tensor):
        raise ContractError("backward: root must be a Tensor")
    if root.data.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return

    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._param is not None:
            node._param.grad += g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params):
    for p in params:
        p.zero_grad()


def grad_check(f, params, h=1e-4):
    """Compare recorded gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from the current Param values on every call
    and return a scalar tensor. Params must be real64; frozen ones are
    skipped. Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    if h <= 0:
        raise ConfigurationError(f"grad_check: h must be positive, got {h}")
    checked = [p for p in params if p.trainable]
    for p in checked:
        if p.value.dtype != np.float64:
            raise ConfigurationError("grad_check: params must be real64")
    zero_grads(checked)
    backward(f())
    analytic = [p.grad.copy() for p in checked]

    worst = 0.0
    for p, a in zip(checked, analytic):
        flat = p.value.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = f().item()
            flat[i] = saved - h
            down = f().item()
            flat[i] = saved
            numeric = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# seeded streams
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def rng_stream(seed, purpose):
    """Independent counter-based generator for (seed, purpose).

    Distinct purposes give decorrelated streams; the same pair always yields
    the same sequence, on any platform.
    """
    tag = int.from_bytes(hashlib.blake2s(purpose.encode("utf-8"), digest_size=8).digest(), "little")
    return np.random.Generator(np.random.Philox(key=[int(seed) & _MASK64, tag]))
