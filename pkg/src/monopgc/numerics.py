"""Dense tensors with reverse-mode automatic differentiation.

The array backend is numpy; the autodiff graph is built dynamically as
operations run. Two float widths are supported and selected by a global
mode: "run" computes in float32 (training speed), "check" in float64
(finite-difference verification). The kernel set is deliberately closed:
matmul, conv2d, elementwise add/mul/exp/log/elu/relu/sigmoid, softmax,
sum/mean reductions, bilinear resize, max/avg pooling, concatenation,
reshape and transpose. Everything else in the package composes from
these (subtraction and division are provided as compositions).

Broadcasting is restricted to python-scalar against tensor; any other
shape mismatch raises DimensionError.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, DomainError, EvaluationError

_MODE = "run"
_DTYPES = {"run": np.float32, "check": np.float64}


def set_mode(mode):
    """Select the global float width: "run" (float32) or "check" (float64)."""
    global _MODE
    if mode not in _DTYPES:
        raise DomainError(f"unknown mode {mode!r}, expected 'run' or 'check'")
    _MODE = mode


def get_mode():
    return _MODE


def current_dtype():
    return _DTYPES[_MODE]


@contextmanager
def check_mode():
    """Temporarily switch tensor creation to 64-bit floats."""
    global _MODE
    prev = _MODE
    _MODE = "check"
    try:
        yield
    finally:
        _MODE = prev


class Tensor:
    """A dense n-d array plus an optional place in the gradient tape.

    Tensors are immutable after creation except for gradient accumulation.
    Results of operations record a backward closure and references to their
    parents; calling backward() on a scalar output replays the recorded
    operations once, in reverse topological order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op",
                 "_backward_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=current_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self._backward_done = False

    @classmethod
    def _result(cls, data, parents, vjp, op):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        out._op = op
        out._backward_done = False
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def numpy(self):
        return self.data

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._vjp = None
        out._op = "detach"
        out._backward_done = False
        return out

    def is_finite(self):
        return bool(np.isfinite(self.data).all())

    def assert_finite(self, what="tensor"):
        if not self.is_finite():
            raise EvaluationError(f"{what} contains NaN/Inf")
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- backward ------------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from this scalar output.

        Each recorded operation is visited exactly once. A second call on
        the same output is an error: rebuild the forward graph instead of
        silently accumulating twice.
        """
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar output")
        if self._backward_done:
            raise RuntimeError(
                "backward() already ran for this graph; zero grads and rebuild "
                "the forward pass before differentiating again")
        self._backward_done = True

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
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

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is not None:
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + pg
                    else:
                        grads[id(parent)] = pg
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(-self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def elu(self):
        return elu(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def _raise_scalar(t):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _coerce_pair(a, b, op):
    """Validate an elementwise pair: same shape, or one python scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return b, False
    if np.isscalar(b):
        return float(b), True
    raise DimensionError(f"{op}: unsupported operand {type(b).__name__}")


# -- elementwise kernels -------------------------------------------------------


def add(a, b):
    a = as_tensor(a)
    b, scalar = _coerce_pair(a, b, "add")
    if scalar:
        data = a.data + a.data.dtype.type(b)
        return Tensor._result(data, (a,), lambda g: (g,), "add")
    data = a.data + b.data
    return Tensor._result(data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a = as_tensor(a)
    b, scalar = _coerce_pair(a, b, "mul")
    if scalar:
        c = a.data.dtype.type(b)
        data = a.data * c
        return Tensor._result(data, (a,), lambda g: (g * c,), "mul")
    data = a.data * b.data
    ad, bd = a.data, b.data
    return Tensor._result(data, (a, b), lambda g: (g * bd, g * ad), "mul")


def exp(x):
    x = as_tensor(x)
    out_data = np.exp(x.data)
    return Tensor._result(out_data, (x,), lambda g: (g * out_data,), "exp")


def log(x):
    x = as_tensor(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        out_data = np.log(x.data)
    xd = x.data
    return Tensor._result(out_data, (x,), lambda g: (g / xd,), "log")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    data = np.where(mask, x.data, x.data.dtype.type(0))
    return Tensor._result(data, (x,), lambda g: (g * mask,), "relu")


def elu(x, alpha=1.0):
    x = as_tensor(x)
    pos = x.data > 0
    expm = np.exp(np.minimum(x.data, 0.0))
    data = np.where(pos, x.data, alpha * (expm - 1.0)).astype(x.data.dtype)
    deriv = np.where(pos, x.data.dtype.type(1), alpha * expm).astype(x.data.dtype)
    return Tensor._result(data, (x,), lambda g: (g * deriv,), "elu")


def sigmoid(x):
    x = as_tensor(x)
    xd = x.data
    out_data = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                        np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd)))).astype(xd.dtype)
    return Tensor._result(out_data, (x,),
                          lambda g: (g * out_data * (1.0 - out_data),), "sigmoid")


def reciprocal(x):
    """1/x for strictly positive tensors, composed as exp(-log(x))."""
    return exp(mul(log(x), -1.0))


def absolute(x):
    """|x| composed from relu(x) + relu(-x)."""
    return add(relu(x), relu(mul(x, -1.0)))


# -- matmul / conv ---------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expected 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    data = ad @ bd

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return Tensor._result(data, (a, b), vjp, "matmul")


def conv2d(x, weight, bias=None):
    """3x3 cross-correlation with zero padding 1; spatial size is preserved.

    x: [C, H, W]; weight: [K, C, 3, 3]; bias: optional [K].
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected [C,H,W] and [K,C,3,3], got {x.shape}, {weight.shape}")
    if weight.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernel spatial size must be 3x3, got {weight.shape[2:]}")
    if weight.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d: channel mismatch, input {x.shape[0]} vs kernel {weight.shape[1]}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({weight.shape[0]},)")

    C, H, W = x.shape
    K = weight.shape[0]
    xd, wd = x.data, weight.data
    padded = np.zeros((C, H + 2, W + 2), dtype=xd.dtype)
    padded[:, 1:H + 1, 1:W + 1] = xd

    out = np.zeros((K, H, W), dtype=xd.dtype)
    for dy in range(3):
        for dx in range(3):
            patch = padded[:, dy:dy + H, dx:dx + W]
            out += np.tensordot(wd[:, :, dy, dx], patch, axes=([1], [0]))
    if bias is not None:
        out = out + bias.data[:, None, None]

    def vjp(g):
        gx_padded = np.zeros_like(padded)
        gw = np.zeros_like(wd)
        for dy in range(3):
            for dx in range(3):
                gx_padded[:, dy:dy + H, dx:dx + W] += np.tensordot(
                    wd[:, :, dy, dx].T, g, axes=([1], [0]))
                gw[:, :, dy, dx] = np.tensordot(
                    g, padded[:, dy:dy + H, dx:dx + W], axes=([1, 2], [1, 2]))
        gx = gx_padded[:, 1:H + 1, 1:W + 1]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, vjp, "conv2d")


# -- softmax and reductions ------------------------------------------------------


def softmax(x, axis):
    """Exponent-normalized along `axis`, stabilized by max subtraction."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return Tensor._result(out_data, (x,), vjp, "softmax")


def _axes_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _axes_tuple(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)
    in_shape = x.shape

    def vjp(g):
        if not keepdims:
            expand = list(in_shape)
            for a in axes:
                expand[a] = 1
            g = g.reshape(expand)
        return (np.broadcast_to(g, in_shape).copy(),)

    return Tensor._result(np.asarray(data), (x,), vjp, "sum")


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _axes_tuple(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


# -- pooling / resizing ----------------------------------------------------------


def max_pool2d(x, size=2):
    """Non-overlapping max pooling with stride == window size.

    Ties inside a window route the gradient to the first (row-major) maximum.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"max_pool2d: expected [C,H,W], got {x.shape}")
    C, H, W = x.shape
    if H % size or W % size:
        raise DimensionError(f"max_pool2d: spatial size {H}x{W} not divisible by {size}")
    oh, ow = H // size, W // size
    windows = x.data.reshape(C, oh, size, ow, size).transpose(0, 1, 3, 2, 4).reshape(C, oh, ow, size * size)
    arg = windows.argmax(axis=3)
    out = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]

    def vjp(g):
        gw = np.zeros((C, oh, ow, size * size), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=3)
        gx = gw.reshape(C, oh, ow, size, size).transpose(0, 1, 3, 2, 4).reshape(C, H, W)
        return (gx,)

    return Tensor._result(out, (x,), vjp, "max_pool2d")


def _pool_bins(n_in, n_out):
    starts = (np.arange(n_out) * n_in) // n_out
    ends = -(-(np.arange(1, n_out + 1) * n_in) // n_out)  # ceil division
    return starts, ends


def adaptive_avg_pool2d(x, out_hw):
    """Average pooling to a fixed output size (torch-compatible bin edges)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"adaptive_avg_pool2d: expected [C,H,W], got {x.shape}")
    oh, ow = out_hw
    C, H, W = x.shape
    if oh > H or ow > W:
        raise DimensionError(f"adaptive_avg_pool2d: output {oh}x{ow} exceeds input {H}x{W}")
    ys, ye = _pool_bins(H, oh)
    xs, xe = _pool_bins(W, ow)
    out = np.zeros((C, oh, ow), dtype=x.data.dtype)
    for i in range(oh):
        rows = x.data[:, ys[i]:ye[i], :]
        for j in range(ow):
            out[:, i, j] = rows[:, :, xs[j]:xe[j]].mean(axis=(1, 2))

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i in range(oh):
            for j in range(ow):
                area = (ye[i] - ys[i]) * (xe[j] - xs[j])
                gx[:, ys[i]:ye[i], xs[j]:xe[j]] += g[:, i, j][:, None, None] / area
        return (gx,)

    return Tensor._result(out, (x,), vjp, "adaptive_avg_pool2d")


def _bilinear_coeffs(n_in, n_out, dtype):
    # Half-pixel-center sampling; source coordinates clamp at the borders.
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    coords = np.clip(coords, 0.0, n_in - 1.0)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (coords - lo).astype(dtype)
    return lo, hi, frac


def bilinear_resize(x, out_hw):
    """Bilinear interpolation to (H, W); constants are preserved exactly."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize: expected [C,H,W], got {x.shape}")
    oh, ow = out_hw
    C, H, W = x.shape
    y0, y1, fy = _bilinear_coeffs(H, oh, x.data.dtype)
    x0, x1, fx = _bilinear_coeffs(W, ow, x.data.dtype)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]

    d = x.data
    out = (d[:, y0][:, :, x0] * (wy0 * wx0) + d[:, y0][:, :, x1] * (wy0 * wx1)
           + d[:, y1][:, :, x0] * (wy1 * wx0) + d[:, y1][:, :, x1] * (wy1 * wx1))
    out = out.astype(d.dtype)

    def vjp(g):
        gx = np.zeros_like(d)
        yy0 = np.repeat(y0, ow)
        yy1 = np.repeat(y1, ow)
        xx0 = np.tile(x0, oh)
        xx1 = np.tile(x1, oh)
        gflat = g.reshape(C, -1)
        for (yy, xx, wgt) in ((yy0, xx0, (wy0 * wx0)), (yy0, xx1, (wy0 * wx1)),
                              (yy1, xx0, (wy1 * wx0)), (yy1, xx1, (wy1 * wx1))):
            contrib = gflat * wgt.reshape(-1)[None, :]
            np.add.at(gx, (slice(None), yy, xx), contrib)
        return (gx,)

    return Tensor._result(out, (x,), vjp, "bilinear_resize")


# -- shape ops -------------------------------------------------------------------


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: empty input list")
    nd = tensors[0].ndim
    axis = axis % nd
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != nd or other[:axis] + other[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(data, tuple(tensors), vjp, "concat")


def reshape(x, shape):
    x = as_tensor(x)
    in_shape = x.shape
    data = x.data.reshape(shape)
    return Tensor._result(data, (x,), lambda g: (g.reshape(in_shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    data = x.data.transpose(axes)
    return Tensor._result(data, (x,), lambda g: (g.transpose(inverse),), "transpose")


# -- parameter helpers -----------------------------------------------------------


def parameter(data):
    return Tensor(data, requires_grad=True)


def randn_param(rng, shape, scale):
    """Gaussian-initialized trainable tensor in the current float width."""
    return parameter(rng.standard_normal(shape) * scale)


def zeros_param(shape):
    return parameter(np.zeros(shape))


# -- verification harness --------------------------------------------------------


def gradient_check(f, x, epsilon=1e-4, sample=None, rng=None):
    """Worst relative disagreement between tape and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor. The check runs in 64-bit mode; `x`
    is promoted to float64. With `sample` set, only that many randomly chosen
    coordinates are differenced (for large inputs). The relative error uses
    denominator max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    with check_mode():
        base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        xt = Tensor(base.copy(), requires_grad=True)
        y = f(xt)
        if y.data.size != 1:
            raise DimensionError("gradient_check: f must return a scalar")
        if not np.isfinite(y.data).all():
            raise EvaluationError("gradient_check: f(x) is non-finite")
        y.backward()
        analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
        analytic = analytic.reshape(-1)

        flat = base.reshape(-1)
        n = flat.size
        if sample is not None and sample < n:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=sample, replace=False)
        else:
            coords = np.arange(n)

        worst = 0.0
        for i in coords:
            plus = flat.copy()
            plus[i] += epsilon
            minus = flat.copy()
            minus[i] -= epsilon
            fp = f(Tensor(plus.reshape(base.shape))).data.reshape(())
            fm = f(Tensor(minus.reshape(base.shape))).data.reshape(())
            numeric = (float(fp) - float(fm)) / (2.0 * epsilon)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
        return worst


def check_all_finite(params):
    """Return names of parameter tensors containing NaN/Inf."""
    bad = []
    for name, t in params.items():
        if not np.isfinite(t.data).all():
            bad.append(name)
    return bad


def warn_once(message):
    warnings.warn(message, stacklevel=3)
