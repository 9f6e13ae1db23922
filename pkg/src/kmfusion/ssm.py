"""Selective state-space scan and the two Mamba block variants."""

import numpy as np

from . import tensor as T
from .kan import KANBlock, PatchEmbed, image_to_tokens, tokens_to_image
from .nn_layers import (
    BOA_MEMBERS,
    BatchNorm2d,
    Conv2d,
    Linear,
    Module,
    SpatialAttention,
    _dtype,
    _normal,
    _rng,
    make_activation,
)
from .tensor import DimensionError


class SelectiveSSM(Module):
    """Input-dependent diagonal SSM over a token sequence (N, L, E).

    A = -exp(A_log) per (channel, state); step size, B and C are linear in
    the current token.  Scan order is the token order given.
    """

    def __init__(self, dim, state=8, rng=None, dtype=None, dt_min=1e-3, dt_max=1e-1):
        super().__init__()
        rng = _rng(rng)
        dtype = _dtype(dtype)
        self.dim, self.state = dim, state
        a = np.geomspace(1.0, float(state), state) if state > 1 else np.ones(1)
        self.A_log = T.parameter(np.tile(np.log(a), (dim, 1)).astype(dtype))
        self.D = T.parameter(np.ones(dim, dtype=dtype))
        self.proj_B = _normal(rng, (state, dim), np.sqrt(1.0 / dim), dtype)
        self.proj_C = _normal(rng, (state, dim), np.sqrt(1.0 / dim), dtype)
        self.proj_delta = _normal(rng, (dim, dim), 0.1 / np.sqrt(dim), dtype)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), dim))
        # inverse softplus so that softplus(bias) == dt
        self.delta_bias = T.parameter((dt + np.log(-np.expm1(-dt))).astype(dtype))

    def discretization(self, u):
        """(delta, A, B, C) for input tokens u."""
        delta = T.softplus(T.linear(u, self.proj_delta, self.delta_bias))
        A = -T.exp(self.A_log)
        return delta, A, T.linear(u, self.proj_B), T.linear(u, self.proj_C)

    def forward(self, u):
        if u.ndim != 3 or u.shape[2] != self.dim:
            raise DimensionError(f"SSM expects (N, L, {self.dim}), got {u.shape}")
        delta, A, B, C = self.discretization(u)
        return T.selective_scan(u, delta, A, B, C, self.D)


def selective_scan(ssm, u):
    return ssm(u)


class MambaKanBlock(Module):
    """Patch embed -> KAN block -> activation bag -> SSM -> spatial attention
    -> per-token projection, summed with the resampled input and a parallel
    activation bag on that resampled input.

    The resample is a 2x average pool (the main path is stride 2) followed by
    a 1x1 projection when channel counts differ.
    """

    def __init__(self, in_ch, dim, state=8, grid=None, main_act="boa", gate_act="boa",
                 members=BOA_MEMBERS, rng=None, dtype=None):
        super().__init__()
        rng = _rng(rng)
        self.in_ch, self.dim = in_ch, dim
        self.patch_embed = PatchEmbed(in_ch, dim, rng=rng, dtype=dtype)
        self.kanb = KANBlock(dim, grid, rng=rng, dtype=dtype)
        self.act_main = make_activation(main_act, members, dtype)
        self.ssm = SelectiveSSM(dim, state, rng=rng, dtype=dtype)
        self.attn = SpatialAttention(rng=rng, dtype=dtype)
        self.out_proj = Linear(dim, dim, rng=rng, dtype=dtype)
        self.skip_proj = Conv2d(in_ch, dim, 1, padding=0, rng=rng, dtype=dtype) if in_ch != dim else None
        self.act_gate = make_activation(gate_act, members, dtype)

    def resample(self, x):
        r = T.avgpool2x(x)
        return self.skip_proj(r) if self.skip_proj is not None else r

    def branches(self, x):
        """The three summands (main, skip, gate) of the block output."""
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DimensionError(f"Mamba-KAN block expects (N, {self.in_ch}, H, W), got {x.shape}")
        tokens, h, w = self.patch_embed(x)
        t = self.kanb(tokens, h, w)
        t = self.act_main(t)
        t = self.ssm(t)
        img = self.attn(tokens_to_image(t, h, w))
        main = tokens_to_image(self.out_proj(image_to_tokens(img)), h, w)
        skip = self.resample(x)
        return main, skip, self.act_gate(skip)

    def forward(self, x, keep=(True, True, True)):
        parts = [b for b, k in zip(self.branches(x), keep) if k]
        if not parts:
            raise ValueError("at least one branch must be kept")
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out


class ConvBN(Module):
    def __init__(self, ch, rng=None, dtype=None):
        super().__init__()
        self.conv = Conv2d(ch, ch, 3, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(ch, dtype=dtype)

    def forward(self, x):
        return self.bn(self.conv(x))


class ClassicalMambaBlock(Module):
    """1x1 input projection, three conv3x3+BN mini-blocks separated by
    spatial attention, activation, SSM over row-major tokens, spatial
    attention, 1x1 output projection; plus skip and activation(skip).
    Spatial extents and channel count are preserved."""

    def __init__(self, channels, dim=None, state=8, act="silu", members=BOA_MEMBERS, rng=None, dtype=None):
        super().__init__()
        rng = _rng(rng)
        dim = dim or channels
        self.channels, self.dim = channels, dim
        self.in_proj = Conv2d(channels, dim, 1, padding=0, rng=rng, dtype=dtype)
        self.mini = [ConvBN(dim, rng=rng, dtype=dtype) for _ in range(3)]
        self.mini_attn = [SpatialAttention(rng=rng, dtype=dtype) for _ in range(2)]
        self.act_main = make_activation(act, members, dtype)
        self.ssm = SelectiveSSM(dim, state, rng=rng, dtype=dtype)
        self.attn = SpatialAttention(rng=rng, dtype=dtype)
        self.out_proj = Conv2d(dim, channels, 1, padding=0, rng=rng, dtype=dtype)
        self.act_gate = make_activation(act, members, dtype)

    def branches(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"Mamba block expects (N, {self.channels}, H, W), got {x.shape}")
        H, W = x.shape[2:]
        z = self.in_proj(x)
        z = self.mini[0](z)
        z = self.mini_attn[0](z)
        z = self.mini[1](z)
        z = self.mini_attn[1](z)
        z = self.mini[2](z)
        z = self.act_main(z)
        t = self.ssm(image_to_tokens(z))
        img = self.attn(tokens_to_image(t, H, W))
        main = self.out_proj(img)
        return main, x, self.act_gate(x)

    def forward(self, x, keep=(True, True, True)):
        parts = [b for b, k in zip(self.branches(x), keep) if k]
        if not parts:
            raise ValueError("at least one branch must be kept")
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out
