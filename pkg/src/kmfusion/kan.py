"""Kolmogorov-Arnold layers on uniform B-spline grids, plus patch embedding."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn_layers import (
    BatchNorm2d,
    Conv2d,
    DepthwiseConv2d,
    LayerNorm,
    Linear,
    Module,
    _dtype,
    _normal,
    _rng,
    activation,
)
from .tensor import DimensionError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplineGrid:
    """Uniform knots over [lo, hi] with ``intervals`` cells, extended by
    ``degree`` knots on each side."""

    lo: float = -1.0
    hi: float = 1.0
    intervals: int = 5
    degree: int = 3

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"spline grid needs lo < hi, got [{self.lo}, {self.hi}]")
        if self.intervals < 1 or self.degree < 0:
            raise ConfigError(f"spline grid needs intervals >= 1 and degree >= 0")

    @property
    def step(self):
        return (self.hi - self.lo) / self.intervals

    @property
    def n_basis(self):
        return self.intervals + self.degree

    @property
    def knots(self):
        k = self.degree
        return self.lo + self.step * np.arange(-k, self.intervals + k + 1, dtype=np.float64)


def bspline_basis(x, grid):
    """Basis values B_j(x) for every element: shape ``x.shape + (G + k,)``.

    Accepts a scalar, numpy array or Tensor; the Tensor path is differentiable.
    """
    if isinstance(x, T.Tensor):
        return T.bspline(x, grid.lo, grid.hi, grid.intervals, grid.degree)
    arr = np.asarray(x, dtype=np.float64)
    vals, _ = T.kernels.bspline_basis(arr.reshape(-1), grid.lo, grid.step, grid.intervals, grid.degree)
    return vals.reshape(arr.shape + (grid.n_basis,))


class KANLinear(Module):
    """out_q = sum_p base_weight[q,p] * act(x_p) + sum_p sum_j coeff[q,p,j] * B_j(x_p)."""

    def __init__(self, n_in, n_out, grid=None, base_activation="silu", rng=None, dtype=None, spline_std=0.1):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise ConfigError("KANLinear needs n_in, n_out >= 1")
        rng = _rng(rng)
        dtype = _dtype(dtype)
        self.grid = grid or SplineGrid()
        self.n_in, self.n_out = n_in, n_out
        self.base_activation = base_activation
        self.base_weight = _normal(rng, (n_out, n_in), np.sqrt(1.0 / n_in), dtype)
        self.spline_coeffs = _normal(rng, (n_out, n_in, self.grid.n_basis), spline_std / np.sqrt(n_in), dtype)

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"KANLinear expects last dim {self.n_in}, got {x.shape}")
        base = T.linear(activation(self.base_activation, x), self.base_weight)
        basis = bspline_basis(x, self.grid)
        flat = T.reshape(basis, x.shape[:-1] + (self.n_in * self.grid.n_basis,))
        coeffs = T.reshape(self.spline_coeffs, (self.n_out, self.n_in * self.grid.n_basis))
        return base + T.linear(flat, coeffs)


def tokens_to_image(t, h, w):
    N, L, E = t.shape
    if L != h * w:
        raise DimensionError(f"token count {L} != {h}x{w}")
    return T.reshape(T.transpose(t, (0, 2, 1)), (N, E, h, w))


def image_to_tokens(x):
    N, C, H, W = x.shape
    return T.transpose(T.reshape(x, (N, C, H * W)), (0, 2, 1))


class DwConv(Module):
    """Depthwise conv3x3 + batch norm + ReLU on a token grid."""

    def __init__(self, dim, rng=None, dtype=None):
        super().__init__()
        self.conv = DepthwiseConv2d(dim, 3, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(dim, dtype=dtype)

    def forward(self, tokens, h, w):
        img = tokens_to_image(tokens, h, w)
        return image_to_tokens(T.relu(self.bn(self.conv(img))))


class KANLayer(Module):
    """Three rounds of KANLinear followed by DwConv; shape preserving."""

    def __init__(self, dim, grid=None, base_activation="silu", rng=None, dtype=None):
        super().__init__()
        rng = _rng(rng)
        self.dim = dim
        self.fcs = [KANLinear(dim, dim, grid, base_activation, rng=rng, dtype=dtype) for _ in range(3)]
        self.dwconvs = [DwConv(dim, rng=rng, dtype=dtype) for _ in range(3)]

    def forward(self, x, h, w):
        if x.ndim != 3 or x.shape[2] != self.dim:
            raise DimensionError(f"KAN layer expects (N, L, {self.dim}), got {x.shape}")
        if x.shape[1] != h * w:
            raise DimensionError(f"KAN layer: token count {x.shape[1]} != {h}x{w}")
        for fc, dw in zip(self.fcs, self.dwconvs):
            x = dw(fc(x), h, w)
        return x


class KANBlock(Module):
    """x + LayerNorm(KANLayer(x))."""

    def __init__(self, dim, grid=None, base_activation="silu", rng=None, dtype=None):
        super().__init__()
        self.layer = KANLayer(dim, grid, base_activation, rng=rng, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)

    def forward(self, x, h, w):
        return x + self.norm(self.layer(x, h, w))


class MLPBlock(Module):
    """x + LayerNorm(fc2(GELU(fc1(x)))): the MLP stand-in for a KAN block."""

    def __init__(self, dim, hidden=None, rng=None, dtype=None):
        super().__init__()
        rng = _rng(rng)
        hidden = hidden or dim
        self.fc1 = Linear(dim, hidden, bias=True, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, bias=True, rng=rng, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)

    def forward(self, x, h=None, w=None):
        return x + self.norm(self.fc2(T.gelu(self.fc1(x))))


class PatchEmbed(Module):
    """Strided conv3x3 (stride 2, pad 1) to ``dim`` channels, flattened
    row-major to tokens and layer-normed.  Returns ``(tokens, h, w)``."""

    def __init__(self, in_ch, dim, rng=None, dtype=None):
        super().__init__()
        self.proj = Conv2d(in_ch, dim, 3, stride=2, padding=1, rng=rng, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)

    def forward(self, x):
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise DimensionError(f"patch embedding needs H, W >= 2, got {x.shape}")
        img = self.proj(x)
        h, w = img.shape[2], img.shape[3]
        return self.norm(image_to_tokens(img)), h, w
