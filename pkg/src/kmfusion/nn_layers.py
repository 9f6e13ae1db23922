"""Modules and the paper-level building blocks.

Contains the parameter-registry base class, plain layers (convolutions,
normalizations, linear maps), the activation set, the Bag of Activations,
CBAM-style spatial attention, and the pooling / interpolating conv blocks.
"""

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


class Module:
    """Base class: parameters are attribute tensors with ``requires_grad``.

    Registry order is attribute definition order, recursing into child
    modules and lists of modules.  Buffers (non-learned state such as batch
    norm running statistics) are numpy arrays named in ``_buffers``.
    """

    _buffers = ()

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        seen = set()
        for name, p in self._named_parameters(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _named_parameters(self, prefix):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child._named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        targets = {name: p for name, p in self.named_parameters()}
        buffers = dict(self.named_buffers())
        for name, arr in state.items():
            if name in targets:
                dst = targets[name].data
            elif name in buffers:
                dst = buffers[name]
            else:
                raise KeyError(f"unexpected tensor {name!r}")
            if dst.shape != tuple(arr.shape):
                raise DimensionError(f"tensor {name!r}: expected shape {dst.shape}, got {tuple(arr.shape)}")
            dst[...] = arr
        missing = (set(targets) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)}")

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        dtype = np.dtype(T.DTYPES.get(dtype, dtype))
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        for name in self._buffers:
            setattr(self, name, getattr(self, name).astype(dtype))
        for _, child in self.children():
            child._cast_buffers(dtype)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def _dtype(dtype):
    return np.dtype(T.DTYPES.get(dtype, dtype or T.get_default_dtype()))


def _rng(rng):
    return rng if rng is not None else np.random.default_rng(0)


def _normal(rng, shape, std, dtype):
    return T.parameter((rng.standard_normal(shape) * std).astype(dtype))


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, bias=False, rng=None, dtype=None):
        super().__init__()
        dtype = _dtype(dtype)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_ch * kernel * kernel
        self.weight = _normal(_rng(rng), (out_ch, in_ch, kernel, kernel), np.sqrt(2.0 / fan_in), dtype)
        self.bias = T.parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel=3, rng=None, dtype=None):
        super().__init__()
        dtype = _dtype(dtype)
        self.padding = kernel // 2
        self.weight = _normal(_rng(rng), (channels, 1, kernel, kernel), np.sqrt(2.0 / (kernel * kernel)), dtype)

    def forward(self, x):
        return T.depthwise_conv2d(x, self.weight, None, 1, self.padding)


class Linear(Module):
    """Token-wise affine map over the last axis; weight is (out, in)."""

    def __init__(self, n_in, n_out, bias=False, rng=None, dtype=None, std=None):
        super().__init__()
        dtype = _dtype(dtype)
        self.weight = _normal(_rng(rng), (n_out, n_in), np.sqrt(1.0 / n_in) if std is None else std, dtype)
        self.bias = T.parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=None):
        super().__init__()
        dtype = _dtype(dtype)
        self.momentum = momentum
        self.eps = eps
        self.gamma = T.parameter(np.ones(channels, dtype=dtype))
        self.beta = T.parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        return T.batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=None):
        super().__init__()
        dtype = _dtype(dtype)
        self.eps = eps
        self.gamma = T.parameter(np.ones(dim, dtype=dtype))
        self.beta = T.parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


# -- activations -----------------------------------------------------------

ACTIVATIONS = {
    "relu": T.relu,
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "softplus": T.softplus,
    "gelu": T.gelu,
    "silu": T.silu,
    "identity": T.identity,
}

BOA_MEMBERS = ("relu", "tanh", "softplus", "gelu", "silu")


def activation(kind, x):
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(ACTIVATIONS)}") from None
    return fn(x)


class Activation(Module):
    """A fixed activation wrapped as a module (no parameters)."""

    def __init__(self, kind):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x):
        return activation(self.kind, x)


class BagOfActivations(Module):
    """Learnable weighted sum of fixed activations.

    Weights start equal at ``1/P`` and are left unconstrained.
    """

    def __init__(self, members=BOA_MEMBERS, dtype=None):
        super().__init__()
        if not members:
            raise ValueError("bag of activations needs at least one member")
        for kind in members:
            if kind not in ACTIVATIONS:
                raise ValueError(f"unknown activation {kind!r}")
        dtype = _dtype(dtype)
        self.members = tuple(members)
        self.alphas = T.parameter(np.full(len(members), 1.0 / len(members), dtype=dtype))

    def forward(self, x):
        return boa_forward(self.alphas, self.members, x)


def boa_forward(alphas, members, x):
    shape = x.shape
    stacked = T.concat([T.reshape(activation(k, x), shape + (1,)) for k in members], axis=-1)
    out = T.linear(stacked, T.reshape(alphas, (1, len(members))))
    return T.reshape(out, shape)


def make_activation(spec, members=BOA_MEMBERS, dtype=None):
    """``"boa"`` builds a bag of activations; any other name a fixed activation."""
    if spec == "boa":
        return BagOfActivations(members, dtype=dtype)
    return Activation(spec)


# -- attention and conv blocks -------------------------------------------

class SpatialAttention(Module):
    """Sigmoid of a 7x7 conv over [channel-mean; channel-max], gating the input."""

    def __init__(self, kernel=7, rng=None, dtype=None):
        super().__init__()
        dtype = _dtype(dtype)
        self.padding = kernel // 2
        self.kernel = _normal(_rng(rng), (1, 2, kernel, kernel), np.sqrt(1.0 / (2 * kernel * kernel)), dtype)
        self.bias = T.parameter(np.zeros(1, dtype=dtype))

    def attention_map(self, F):
        pooled = T.concat([T.mean(F, axis=1, keepdims=True), T.max_(F, axis=1, keepdims=True)], axis=1)
        return T.sigmoid(T.conv2d(pooled, self.kernel, self.bias, 1, self.padding))

    def forward(self, F):
        return F * self.attention_map(F)


class ConvBNReLU(Module):
    def __init__(self, in_ch, out_ch, rng=None, dtype=None):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class ConvBlock(Module):
    """Two conv3x3-BN-ReLU stages, then 2x max pool (``"pool"``) or 2x
    bilinear upsampling (``"interp"``)."""

    def __init__(self, in_ch, out_ch, kind="pool", rng=None, dtype=None):
        super().__init__()
        if kind not in ("pool", "interp"):
            raise ValueError(f"conv block kind must be 'pool' or 'interp', got {kind!r}")
        self.kind = kind
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.stage1 = ConvBNReLU(in_ch, out_ch, rng=rng, dtype=dtype)
        self.stage2 = ConvBNReLU(out_ch, out_ch, rng=rng, dtype=dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DimensionError(f"conv block expects (N, {self.in_ch}, H, W), got {x.shape}")
        y = self.stage2(self.stage1(x))
        if self.kind == "pool":
            return T.maxpool2d(y, 2, 2)
        return T.bilinear_upsample2x(y)


def conv_block(in_ch, out_ch, rng=None, dtype=None):
    return ConvBlock(in_ch, out_ch, "pool", rng=rng, dtype=dtype)


def dwconv_block(in_ch, out_ch, rng=None, dtype=None):
    return ConvBlock(in_ch, out_ch, "interp", rng=rng, dtype=dtype)
