"""Dense tensors with reverse-mode automatic differentiation on top of numpy.

Every op builds a node only when grad mode is on and at least one input
requires a gradient.  A node stores its parents and a closure mapping the
output gradient to one gradient per parent; the closure never references
the output tensor, so graphs are freed as soon as the loss goes out of scope.

Gradients accumulate into ``Tensor.grad`` of leaf tensors only.  Calling
:meth:`Tensor.backward` twice on the same loss adds the gradients twice.
"""

import json
import struct
from contextlib import contextmanager
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels


class DimensionError(ValueError):
    pass


class NumericDomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_state = {"grad": True, "dtype": np.float64, "macs": None}

DTYPES = {"f32": np.float32, "f64": np.float64}


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    _state["dtype"] = np.dtype(DTYPES.get(dtype, dtype)).type


@contextmanager
def precision(dtype):
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def is_grad_enabled():
    return _state["grad"]


class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_op = {}

    def add(self, op, n):
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextmanager
def count_macs():
    """Tally multiply-accumulates of conv, matmul and scan ops run inside."""
    prev = _state["macs"]
    counter = MacCounter()
    _state["macs"] = counter
    try:
        yield counter
    finally:
        _state["macs"] = prev


def _macs(op, n):
    counter = _state["macs"]
    if counter is not None:
        counter.add(op, n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(get_default_dtype())
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every requires_grad leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.astype(node.data.dtype, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # -- operator sugar ----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return max_(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None, name=None):
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def zeros(shape, dtype=None, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype or get_default_dtype()), requires_grad)


def ones(shape, dtype=None, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype or get_default_dtype()), requires_grad)


def ones_like(x):
    return Tensor(np.ones_like(x.data))


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or get_default_dtype()))


def _node(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary ----------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scale(b, a)
    a, b = _as_tensor(a, b), _as_tensor(b, a)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _node(ad * bd, (a, b), backward, "mul")


def div(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NumericDomainError("div: divisor contains zeros")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), backward, "div")


def scale(a, c):
    """Multiply by a Python scalar constant."""
    c = a.data.dtype.type(c)

    def backward(g):
        return (g * c,)

    return _node(a.data * c, (a,), backward, "scale")


def neg(a):
    def backward(g):
        return (-g,)

    return _node(-a.data, (a,), backward, "neg")


# -- elementwise unary -----------------------------------------------------

def exp(a):
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _node(out, (a,), backward, "exp")


def log(a):
    if np.any(a.data <= 0):
        raise NumericDomainError("log: argument must be strictly positive")
    ad = a.data

    def backward(g):
        return (g / ad,)

    return _node(np.log(ad), (a,), backward, "log")


def relu(a):
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _node(np.where(mask, a.data, a.data.dtype.type(0)), (a,), backward, "relu")


def _sigmoid(x):
    # stable for both signs
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def sigmoid(a):
    out = _sigmoid(a.data)

    def backward(g):
        return (g * out * (1 - out),)

    return _node(out, (a,), backward, "sigmoid")


def tanh(a):
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1 - out * out),)

    return _node(out, (a,), backward, "tanh")


SOFTPLUS_THRESHOLD = 30.0


def softplus(a):
    x = a.data
    big = x > SOFTPLUS_THRESHOLD
    out = np.where(big, x, np.log1p(np.exp(np.minimum(x, SOFTPLUS_THRESHOLD))))

    def backward(g):
        return (g * np.where(big, 1, _sigmoid(x)),)

    return _node(out.astype(x.dtype, copy=False), (a,), backward, "softplus")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def backward(g):
        dinner = c * (1 + 3 * k * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _node(out, (a,), backward, "gelu")


def silu(a):
    x = a.data
    s = _sigmoid(x)

    def backward(g):
        return (g * (s * (1 + x * (1 - s))),)

    return _node(x * s, (a,), backward, "silu")


def identity(a):
    return a


# -- shape ops -------------------------------------------------------------

def reshape(a, shape):
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(src),)

    return _node(out, (a,), backward, "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _node(a.data.transpose(axes), (a,), backward, "transpose")


def concat(tensors, axis=0):
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), backward, "concat")


def sum_(a, axis=None, keepdims=False):
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    src = a.shape
    count = a.data.size if axis is None else int(np.prod([src[i] for i in np.atleast_1d(axis)]))
    inv = a.data.dtype.type(1.0 / count)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, src),)

    return _node(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward, "mean")


def max_(a, axis, keepdims=False):
    """Max along one axis; the gradient goes to the first maximal element."""
    x = a.data
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    out = np.take_along_axis(x, idx, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return _node(out if keepdims else np.squeeze(out, axis), (a,), backward, "max")


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    """``a @ b`` with numpy batch broadcasting; ``b`` may be a plain matrix."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    _macs("matmul", out.size * ad.shape[-1])

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[1])
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    _macs("matmul", out.size * wd.shape[1])

    def backward(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out.reshape(lead + (wd.shape[0],)), parents, backward, "linear")


# -- convolution and pooling ----------------------------------------------

def _out_extent(n, k, stride, padding, op):
    if k > n + 2 * padding:
        raise DimensionError(f"{op}: kernel extent {k} exceeds padded input extent {n + 2 * padding}")
    return (n + 2 * padding - k) // stride + 1


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of NCHW input with an (O, C, kh, kw) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape}, {weight.shape}")
    N, C, H, W = x.shape
    O, Ck, kh, kw = weight.shape
    if Ck != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    Ho = _out_extent(H, kh, stride, padding, "conv2d")
    Wo = _out_extent(W, kw, stride, padding, "conv2d")
    xp = _pad(x.data, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, C, kh, kw) rows against (O, C*kh*kw) kernel
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kh * kw)
    wm = weight.data.reshape(O, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))
    _macs("conv2d", N * O * C * kh * kw * Ho * Wo)
    xshape, pshape = x.shape, xp.shape

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = gw = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(weight.shape)
        if x.requires_grad:
            dcols = (gm @ wm).reshape(N, Ho, Wo, C, kh, kw)
            gxp = np.zeros(pshape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + xshape[2], padding : padding + xshape[3]] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "conv2d")


def depthwise_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Per-channel cross-correlation; kernel is (C, 1, kh, kw)."""
    N, C, H, W = x.shape
    if weight.shape[0] != C or weight.shape[1] != 1:
        raise DimensionError(f"depthwise_conv2d: kernel {weight.shape} does not match {C} channels")
    kh, kw = weight.shape[2:]
    Ho = _out_extent(H, kh, stride, padding, "depthwise_conv2d")
    Wo = _out_extent(W, kw, stride, padding, "depthwise_conv2d")
    xp = _pad(x.data, padding)
    k = weight.data[:, 0]
    out = np.zeros((N, C, Ho, Wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] * k[:, i, j][:, None, None]
    if bias is not None:
        out += bias.data[:, None, None]
    _macs("depthwise_conv2d", N * C * kh * kw * Ho * Wo)
    xshape = x.shape

    def backward(g):
        gx = gw = None
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", patch, g)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g * k[:, i, j][:, None, None]
            gx = gxp[:, :, padding : padding + xshape[2], padding : padding + xshape[3]] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "depthwise_conv2d")


def maxpool2d(x, window=2, stride=2):
    """Max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties send the gradient to the first element in row-major window order.
    """
    N, C, H, W = x.shape
    Ho = _out_extent(H, window, stride, 0, "maxpool2d")
    Wo = _out_extent(W, window, stride, 0, "maxpool2d")
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(N, C, Ho, Wo, window * window)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    xshape = x.shape

    def backward(g):
        gx = np.zeros(xshape, dtype=g.dtype)
        di, dj = np.divmod(arg, window)
        n, c, oi, oj = np.indices((N, C, Ho, Wo), sparse=True)
        np.add.at(gx, (n, c, oi * stride + di, oj * stride + dj), g)
        return (gx,)

    return _node(out, (x,), backward, "maxpool2d")


def avgpool2x(x):
    """2x2 average pooling to (ceil(H/2), ceil(W/2)); odd edges average only real pixels."""
    N, C, H, W = x.shape
    ph, pw = H % 2, W % 2
    xd = x.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    Ho, Wo = xd.shape[2] // 2, xd.shape[3] // 2
    out = xd.reshape(N, C, Ho, 2, Wo, 2).mean(axis=(3, 5))

    def backward(g):
        q = np.repeat(np.repeat(g * g.dtype.type(0.25), 2, axis=2), 2, axis=3)
        if ph:
            q[:, :, H - 1, :] += q[:, :, H, :]
            q = q[:, :, :H]
        if pw:
            q[:, :, :, W - 1] += q[:, :, :, W]
            q = q[:, :, :, :W]
        return (q,)

    return _node(out, (x,), backward, "avgpool2x")


@lru_cache(maxsize=64)
def _upsample_matrix(n, dtype):
    """(2n, n) align_corners=False bilinear interpolation weights."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        w1 = src - i0
        m[o, i0] += 1.0 - w1
        m[o, i1] += w1
    m.flags.writeable = False
    return m


def bilinear_upsample2x(x):
    N, C, H, W = x.shape
    uh = _upsample_matrix(H, x.data.dtype.type)
    uw = _upsample_matrix(W, x.data.dtype.type)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def backward(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return _node(out, (x,), backward, "upsample2x")


# -- normalization ---------------------------------------------------------

def batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch norm on NCHW.

    In training mode the running statistics (plain numpy arrays) are updated
    in place: ``r = (1 - momentum) * r + momentum * batch_stat``, with the
    unbiased variance feeding ``running_var``.
    """
    xd = x.data
    C = xd.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm2d: affine params {gamma.shape} do not match {C} channels")
    axes = (0, 2, 3)
    m = xd.size // C
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.astype(xd.dtype)[:, None, None]) * inv[:, None, None]
    gd = gamma.data
    out = xhat * gd[:, None, None] + beta.data[:, None, None]

    def backward(g):
        gg = np.einsum("nchw,nchw->c", g, xhat)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gd[:, None, None]
            if training:
                gx = (inv / m)[:, None, None] * (
                    m * gxhat
                    - gxhat.sum(axis=axes)[:, None, None]
                    - xhat * np.einsum("nchw,nchw->c", gxhat, xhat)[:, None, None]
                )
            else:
                gx = gxhat * inv[:, None, None]
        return gx, gg, gb

    return _node(out, (x, gamma, beta), backward, "batch_norm2d")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    E = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        lead = g.reshape(-1, E)
        gg = np.einsum("ie,ie->e", lead, xhat.reshape(-1, E))
        gb = lead.sum(axis=0)
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            gx = inv / E * (
                E * gxhat - gxhat.sum(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _node(out, (x, gamma, beta), backward, "layer_norm")


# -- fused kernels ---------------------------------------------------------

def bspline(x, lo, hi, intervals, degree):
    """B-spline basis values of every element of ``x``: shape ``x.shape + (G+k,)``."""
    h = (hi - lo) / intervals
    vals, dvals = kernels.bspline_basis(x.data.reshape(-1), lo, h, intervals, degree)
    n_basis = intervals + degree
    dtype = x.data.dtype
    vals = vals.astype(dtype, copy=False).reshape(x.shape + (n_basis,))
    dvals = dvals.astype(dtype, copy=False).reshape(x.shape + (n_basis,))

    def backward(g):
        return (np.einsum("...j,...j->...", g, dvals),)

    return _node(vals, (x,), backward, "bspline")


def selective_scan(u, delta, A, B, C, D):
    """Diagonal selective state-space recurrence.

    ``h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t`` and
    ``y_t = C_t . h_t + D * u_t`` with ``h_0 = 0``, per batch item and channel.
    Shapes: u, delta (N, L, E); A (E, S); B, C (N, L, S); D (E,).
    """
    N, L, E = u.shape
    S = A.shape[1]
    if delta.shape != u.shape or A.shape[0] != E or B.shape != (N, L, S) or C.shape != (N, L, S) or D.shape != (E,):
        raise DimensionError(
            f"selective_scan: u{u.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape} D{D.shape}"
        )
    args = [t.data for t in (u, delta, A, B, C, D)]
    y, hs = kernels.scan_forward(*args)
    _macs("selective_scan", 3 * N * L * E * S)

    def backward(g):
        return kernels.scan_backward(g, *args, hs)

    return _node(y, (u, delta, A, B, C, D), backward, "selective_scan")


def bce_with_logits(logits, target, eps=1e-7):
    """Mean binary cross-entropy of sigmoid(logits) clipped to [eps, 1-eps].

    Clipping the probability is the same as clipping the logit to
    ``+-log((1-eps)/eps)``, which keeps the stable log-sum-exp form.
    """
    if logits.shape != target.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs target {target.shape}")
    z = target.data if isinstance(target, Tensor) else np.asarray(target)
    lim = np.log((1.0 - eps) / eps)
    ld = logits.data
    lc = np.clip(ld, -lim, lim)
    terms = np.maximum(lc, 0) - lc * z + np.log1p(np.exp(-np.abs(lc)))
    n = ld.size
    inside = (ld > -lim) & (ld < lim)

    def backward(g):
        return ((g / n) * (_sigmoid(lc) - z) * inside, None)

    tgt = target if isinstance(target, Tensor) else Tensor(z)
    return _node(np.asarray(terms.mean(), dtype=ld.dtype), (logits, tgt), backward, "bce")


# -- gradient checking -----------------------------------------------------

def grad_check(f, x, eps=1e-5, samples=None, seed=0):
    """Max relative error between reverse-mode and central-difference gradients.

    ``x`` is a tensor or a list of tensors; ``f`` receives them as positional
    arguments and returns a scalar tensor.  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.  With ``samples`` set, that
    many random coordinates per tensor are checked instead of all of them.
    """
    xs = list(x) if isinstance(x, (list, tuple)) else [x]
    for t in xs:
        t.grad = None
    loss = f(*xs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            if samples is None or samples >= flat.size:
                idxs = range(flat.size)
            else:
                idxs = rng.choice(flat.size, size=samples, replace=False)
            af = a.reshape(-1)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*xs).data)
                flat[i] = orig - eps
                fm = float(f(*xs).data)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                err = abs(af[i] - num) / max(1.0, abs(af[i]))
                worst = max(worst, err)
    for t in xs:
        t.grad = None
    return worst


def kink_free(rng, shape, margin=1e-3, scale=1.0, dtype=np.float64):
    """Normal samples with every value at least ``margin`` away from zero."""
    a = rng.standard_normal(shape) * scale
    small = np.abs(a) < margin
    a[small] = np.where(a[small] >= 0, margin, -margin) * 2
    return a.astype(dtype)


# -- serialization ---------------------------------------------------------

def write_array(fp, arr):
    """Write one tensor container: u32 header length, JSON header, raw LE data."""
    arr = np.asarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    header = json.dumps(
        {"shape": list(arr.shape), "dtype": arr.dtype.name, "byte_order": "little"}, separators=(",", ":")
    ).encode()
    fp.write(struct.pack("<I", len(header)))
    fp.write(header)
    fp.write(np.ascontiguousarray(le).tobytes())


def read_array(fp):
    raw = fp.read(4)
    if len(raw) != 4:
        raise ValueError("truncated tensor container")
    (n,) = struct.unpack("<I", raw)
    header = json.loads(fp.read(n).decode())
    if header.get("byte_order") != "little":
        raise ValueError(f"unsupported byte order {header.get('byte_order')!r}")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    count = int(np.prod(header["shape"], dtype=np.int64))
    buf = fp.read(count * dtype.itemsize)
    if len(buf) != count * dtype.itemsize:
        raise ValueError("truncated tensor data")
    return np.frombuffer(buf, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(header["shape"])


def save_tensor(path, t):
    with open(path, "wb") as fp:
        write_array(fp, t.data if isinstance(t, Tensor) else t)


def load_tensor(path, requires_grad=False):
    with open(path, "rb") as fp:
        return Tensor(read_array(fp), requires_grad=requires_grad)
