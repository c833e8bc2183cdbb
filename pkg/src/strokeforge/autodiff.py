"""Dense float64 tensors with reverse-mode automatic differentiation.

Every network and loss in this package is expressed in the operations below.
Arrays are stored as numpy float64; the differentiation graph, all backward
rules, convolution and pooling are implemented here from scratch.
"""
from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input values outside an operation's domain (log of <= 0, division by 0)."""


class GeometryError(ValueError):
    """Spatial geometry does not work out (stride/padding/pool divisibility)."""


class GradcheckNaNError(RuntimeError):
    """Analytic or numeric gradient contained NaN during gradcheck."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense N-d float64 array that may participate in the backward graph.

    ``grad`` accumulates with ``+=`` across backward() calls on leaves that
    have ``requires_grad``; call :meth:`zero_grad` to reset between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A new graph-free view of the same values."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Reverse-mode sweep from this scalar; accumulates into leaf grads."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is not None:
                parent_grads = node._backward_fn(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg
            elif node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def sum(self, axes=None, keepdims=False):
        return tsum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return tmean(self, axes, keepdims)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _toposort(root):
    """Iterative post-order: every node appears after all of its parents."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _check_broadcast(a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"shapes {a_shape} and {b_shape} do not broadcast") from None


def _unbroadcast(grad, shape):
    """Sum-reduce ``grad`` back to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(x):
    x = _lift(x)
    return _make(-x.data, (x,), lambda g: (-g,))


def exp(x):
    x = _lift(x)
    out_data = np.exp(x.data)
    return _make(out_data, (x,), lambda g: (g * out_data,))


def log(x):
    x = _lift(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def absval(x):
    x = _lift(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x):
    x = _lift(x)
    return _make(x.data * x.data, (x,), lambda g: (g * 2.0 * x.data,))


def sqrt(x):
    x = _lift(x)
    if np.any(x.data < 0.0):
        raise DomainError("sqrt of negative value")
    out_data = np.sqrt(x.data)
    return _make(out_data, (x,), lambda g: (g * 0.5 / out_data,))


def clip(x, lo, hi):
    """Clamp values; gradient is passed through only where nothing clipped."""
    x = _lift(x)
    mask = (x.data > lo) & (x.data < hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


# -- activations ----------------------------------------------------------

def relu(x):
    x = _lift(x)
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = _lift(x)
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return _make(out_data, (x,), lambda g: (g * out_data * (1.0 - out_data),))


def softmax(x, axis):
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward)


# -- reductions -------------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % ndim for a in axes)
    if len(set(axes)) != len(axes) or any(a >= ndim for a in axes):
        raise ShapeError(f"invalid reduction axes {axes} for ndim {ndim}")
    return axes


def tsum(x, axes=None, keepdims=False):
    x = _lift(x)
    axes = _norm_axes(axes, x.data.ndim)
    out_data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(out_data, (x,), backward)


def tmean(x, axes=None, keepdims=False):
    x = _lift(x)
    axes = _norm_axes(axes, x.data.ndim)
    count = x.data.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    out_data = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape) / count,)

    return _make(out_data, (x,), backward)


# -- convolution and pooling ------------------------------------------------

def conv2d(x, kernel, bias, stride=1, padding=None):
    """2D convolution (cross-correlation) on [N,C,H,W] with kernel [K,C,kh,kw].

    ``padding=None`` means "same" for stride 1 (kh//2). Geometry that does not
    divide evenly is a hard error, never silent cropping.
    """
    x, kernel, bias = _lift(x), _lift(kernel), _lift(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d wants 4-d input/kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, c2, kh, kw = kernel.shape
    if c != c2:
        raise ShapeError(f"input channels {c} != kernel channels {c2}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise GeometryError(f"kernel extents must be odd, got {kh}x{kw}")
    if bias.shape != (k,):
        raise ShapeError(f"bias shape {bias.shape} != ({k},)")
    if padding is None:
        padding = kh // 2
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise GeometryError(
            f"conv geometry does not divide: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")
    hp = (h + 2 * padding - kh) // stride + 1
    wp = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                      # [N,C,Hp,Wp,kh,kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * hp * wp, c * kh * kw)
    kmat = kernel.data.reshape(k, -1)
    out_data = (cols @ kmat.T + bias.data).reshape(n, hp, wp, k).transpose(0, 3, 1, 2)

    def backward(g):
        go = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * hp * wp, k)
        gb = go.sum(axis=0)
        gk = (go.T @ cols).reshape(k, c, kh, kw)
        gcols = (go @ kmat).reshape(n, hp, wp, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * hp:stride, j:j + stride * wp:stride] += gcols[..., i, j]
        if padding:
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        else:
            gx = gxp
        return gx, gk, gb

    return _make(out_data, (x, kernel, bias), backward)


def maxpool2(x):
    """2x2 max pooling with stride 2; spatial extents must be even."""
    x = _lift(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise GeometryError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)  # first maximum wins on ties
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        return (gflat.reshape(n, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(out_data, (x,), backward)


def avgpool_global(x):
    """Global average pool [N,C,H,W] -> [N,C,1,1]."""
    x = _lift(x)
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _make(out_data, (x,), backward)


def upsample_nearest2(x):
    """Nearest-neighbor 2x upsampling [N,C,H,W] -> [N,C,2H,2W]."""
    x = _lift(x)
    n, c, h, w = x.shape
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out_data, (x,), backward)


def concat(tensors, axis):
    tensors = [_lift(t) for t in tensors]
    ndim = tensors[0].data.ndim
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if t.data.ndim != ndim or other[:axis] + other[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError(f"concat shapes differ off axis {axis}: "
                             f"{[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * ndim
        out = []
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def concat_channels(x, y):
    """Concatenate two [N,C,H,W] maps along the channel axis."""
    return concat([x, y], axis=1)


def reshape(x, shape):
    x = _lift(x)
    old = x.shape
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}")
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# -- verification harness ----------------------------------------------------

def gradcheck(f, x, eps=1e-4, sample=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of the tensor ``x``.
    ``sample`` limits the check to that many randomly chosen elements (the
    analytic side is always complete); None checks every element.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = x.grad.copy()
    if np.any(np.isnan(analytic)):
        raise GradcheckNaNError("NaN in analytic gradient")

    flat = x.data.reshape(-1)
    if sample is None or sample >= flat.size:
        indices = np.arange(flat.size)
    else:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(flat.size, size=sample, replace=False)

    numeric = np.zeros(len(indices))
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        numeric[j] = (hi - lo) / (2.0 * eps)
    if np.any(np.isnan(numeric)):
        raise GradcheckNaNError("NaN in numeric gradient")

    a = analytic.reshape(-1)[indices]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))
