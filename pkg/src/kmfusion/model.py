"""FusionNet assembly, ablation variants, complexity counters and checkpoints.

Layout (U-KAN skeleton with the Mamba stage after the first conv block)::

    C1 -> M1 -> C2 -> C3 -> P1,K1,L1 -> P2,K2,L2          (encoder)
    D1(+skip),K3 -> D2(+skip),K4 -> D3(+skip) -> D4(+skip) -> D5 -> O1

Encoder stages halve the resolution five times; each decoder stage doubles
it and adds the same-resolution encoder output.
"""

import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .kan import ConfigError, KANBlock, MLPBlock, PatchEmbed, SplineGrid, image_to_tokens, tokens_to_image
from .nn_layers import BOA_MEMBERS, Conv2d, ConvBlock, LayerNorm, Module
from .ssm import ClassicalMambaBlock, MambaKanBlock
from .tensor import DimensionError

VARIANTS = ("mamba_mlp", "mamba_kan", "mamba_boa_kan", "full")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 3
    conv_channels: tuple = (16, 32, 64)
    embed_dims: tuple = (96, 128)
    mamba_dim: int = None
    ssm_state: int = 8
    spline_degree: int = 3
    spline_intervals: int = 5
    spline_range: tuple = (-1.0, 1.0)
    variant: str = "full"
    m1_activation: str = None
    boa_members: tuple = BOA_MEMBERS
    norm_position: str = "after"
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.embed_dims = tuple(int(e) for e in self.embed_dims)
        self.spline_range = tuple(float(v) for v in self.spline_range)
        self.boa_members = tuple(self.boa_members)
        if self.mamba_dim is None:
            self.mamba_dim = self.conv_channels[0] if self.conv_channels else None
        self.validate()

    def validate(self):
        if len(self.conv_channels) != 3 or len(self.embed_dims) != 2:
            raise ConfigError("need three conv_channels and two embed_dims")
        pyramid = self.conv_channels + self.embed_dims
        if any(c < 1 for c in pyramid) or any(a >= b for a, b in zip(pyramid, pyramid[1:])):
            raise ConfigError(f"channel pyramid must be strictly increasing, got {pyramid}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.norm_position not in ("after", "before"):
            raise ConfigError("norm_position must be 'after' or 'before'")
        if self.precision not in T.DTYPES:
            raise ConfigError(f"precision must be one of {sorted(T.DTYPES)}")
        if self.ssm_state < 1 or self.mamba_dim < 1:
            raise ConfigError("ssm_state and mamba_dim must be positive")
        SplineGrid(*self.spline_range, self.spline_intervals, self.spline_degree)

    @property
    def grid(self):
        lo, hi = self.spline_range
        return SplineGrid(lo, hi, self.spline_intervals, self.spline_degree)

    @property
    def activation(self):
        if self.m1_activation is not None:
            return self.m1_activation
        return "boa" if self.variant in ("full", "mamba_boa_kan") else "silu"

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)


TINY = ModelConfig()
REFERENCE = ModelConfig(conv_channels=(32, 64, 128), embed_dims=(160, 256))


class TokenStage(Module):
    """Patch embedding plus KAN block with its layer norm (P/K/L in the legend)."""

    def __init__(self, in_ch, dim, grid, norm_position, rng, dtype):
        super().__init__()
        self.norm_position = norm_position
        self.patch = PatchEmbed(in_ch, dim, rng=rng, dtype=dtype)
        self.kanb = KANBlock(dim, grid, rng=rng, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)

    def forward(self, x):
        t, h, w = self.patch(x)
        if self.norm_position == "before":
            t = self.kanb(self.norm(t), h, w)
        else:
            t = self.norm(self.kanb(t, h, w))
        return tokens_to_image(t, h, w)


class MambaStage(Module):
    """M1: the variant-specific Mamba block, resolution preserving.

    ``full`` uses the Mamba-KAN block, whose stride-2 output is brought back
    to the input resolution by bilinear upsampling.  The other variants run
    the classical Mamba block followed by a token mixer (MLP or KAN block).
    """

    def __init__(self, cfg, in_ch, rng, dtype):
        super().__init__()
        self.variant = cfg.variant
        act = cfg.activation
        if cfg.variant == "full":
            self.block = MambaKanBlock(
                in_ch, cfg.mamba_dim, cfg.ssm_state, cfg.grid, act, act, cfg.boa_members, rng=rng, dtype=dtype
            )
            self.mixer = None
            self.out_ch = cfg.mamba_dim
        else:
            self.block = ClassicalMambaBlock(in_ch, cfg.mamba_dim, cfg.ssm_state, act, cfg.boa_members, rng=rng, dtype=dtype)
            if cfg.variant == "mamba_mlp":
                self.mixer = MLPBlock(in_ch, rng=rng, dtype=dtype)
            else:
                self.mixer = KANBlock(in_ch, cfg.grid, rng=rng, dtype=dtype)
            self.out_ch = in_ch

    def forward(self, x):
        if self.mixer is None:
            return T.bilinear_upsample2x(self.block(x))
        y = self.block(x)
        H, W = y.shape[2:]
        return tokens_to_image(self.mixer(image_to_tokens(y), H, W), H, W)


class FusionNet(Module):
    def __init__(self, cfg):
        super().__init__()
        self.config = cfg
        dtype = T.DTYPES[cfg.precision]
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
        c1, c2, c3 = cfg.conv_channels
        e1, e2 = cfg.embed_dims
        grid = cfg.grid
        kw = dict(rng=rng, dtype=dtype)
        self.c1 = ConvBlock(cfg.in_channels, c1, "pool", **kw)
        self.m1 = MambaStage(cfg, c1, rng, dtype)
        m = self.m1.out_ch
        self.c2 = ConvBlock(m, c2, "pool", **kw)
        self.c3 = ConvBlock(c2, c3, "pool", **kw)
        self.t1 = TokenStage(c3, e1, grid, cfg.norm_position, rng, dtype)
        self.t2 = TokenStage(e1, e2, grid, cfg.norm_position, rng, dtype)
        self.d1 = ConvBlock(e2, e1, "interp", **kw)
        self.k3 = KANBlock(e1, grid, **kw)
        self.d2 = ConvBlock(e1, c3, "interp", **kw)
        self.k4 = KANBlock(c3, grid, **kw)
        self.d3 = ConvBlock(c3, c2, "interp", **kw)
        self.d4 = ConvBlock(c2, c1, "interp", **kw)
        self.skip1 = Conv2d(m, c1, 1, padding=0, **kw) if m != c1 else None
        self.d5 = ConvBlock(c1, c1, "interp", **kw)
        self.o1 = Conv2d(c1, 1, 1, padding=0, bias=True, **kw)

    @staticmethod
    def _kan_on_image(kanb, x):
        H, W = x.shape[2:]
        return tokens_to_image(kanb(image_to_tokens(x), H, W), H, W)

    def forward(self, x):
        if not isinstance(x, T.Tensor):
            x = T.Tensor(np.asarray(x, dtype=T.DTYPES[self.config.precision]))
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(f"expected (N, {self.config.in_channels}, H, W) input, got {x.shape}")
        H, W = x.shape[2:]
        if H % 32 or W % 32:
            raise DimensionError(f"input height and width must be divisible by 32 (five halvings), got {H}x{W}")
        e1 = self.c1(x)
        e1 = self.m1(e1)
        e2 = self.c2(e1)
        e3 = self.c3(e2)
        e4 = self.t1(e3)
        e5 = self.t2(e4)
        d = self._kan_on_image(self.k3, self.d1(e5) + e4)
        d = self._kan_on_image(self.k4, self.d2(d) + e3)
        d = self.d3(d) + e2
        d = self.d4(d) + (self.skip1(e1) if self.skip1 is not None else e1)
        d = self.d5(d)
        return self.o1(d)


def build(cfg=None, **overrides):
    cfg = cfg or ModelConfig()
    if overrides:
        cfg = cfg.replace(**overrides)
    return FusionNet(cfg)


def forward(model, x):
    return model(x)


def count_params(model):
    return int(sum(p.size for p in model.parameters()))


def count_flops(model, input_shape):
    """Multiply-accumulates of one forward pass at ``input_shape``.

    Counted: conv2d ``N*O*C*kh*kw*H'*W'``, depthwise conv ``N*C*kh*kw*H'*W'``,
    matmul/linear ``m*k*n``, selective scan ``3*N*L*E*S`` (two for the state
    update, one for the readout).  Elementwise ops, norms and pooling are
    not counted.
    """
    was_training = model.training
    model.eval()
    try:
        x = T.zeros(tuple(input_shape), dtype=T.DTYPES[model.config.precision])
        with T.no_grad(), T.count_macs() as counter:
            model(x)
    finally:
        model.train(was_training)
    return counter.total


# -- checkpoints -----------------------------------------------------------

MAGIC = b"KMFCKPT1"


def save_checkpoint(path, model, extra=None):
    """Manifest (config, names, shapes, dtypes) then one container per tensor."""
    state = model.state_dict()
    manifest = {
        "format": "kmfusion-checkpoint",
        "version": 1,
        "config": model.config.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": v.dtype.name} for k, v in state.items()],
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(struct.pack("<Q", len(blob)))
        fp.write(blob)
        for v in state.values():
            T.write_array(fp, v)


def read_checkpoint(path):
    with open(path, "rb") as fp:
        if fp.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a kmfusion checkpoint")
        (n,) = struct.unpack("<Q", fp.read(8))
        manifest = json.loads(fp.read(n).decode())
        arrays = {}
        for entry in manifest["tensors"]:
            arr = T.read_array(fp)
            if list(arr.shape) != entry["shape"]:
                raise CheckpointError(
                    f"tensor {entry['name']!r}: container shape {list(arr.shape)} != manifest shape {entry['shape']}"
                )
            arrays[entry["name"]] = arr
    return manifest, arrays


def load_checkpoint(path, precision=None):
    """Rebuild the model from the embedded config and load every tensor by name."""
    manifest, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["config"])
    model = FusionNet(cfg)
    expected = model.state_dict()
    for name, arr in arrays.items():
        if name not in expected:
            raise CheckpointError(f"tensor {name!r} is not part of the configured model")
        if expected[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {expected[name].shape}")
    missing = set(expected) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    model.load_state_dict(arrays)
    if precision is not None and precision != cfg.precision:
        model.astype(precision)
        model.config = cfg.replace(precision=precision)
    return model, manifest.get("extra", {})
