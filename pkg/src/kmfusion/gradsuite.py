"""Reverse-mode vs finite-difference checks for every layer, at 64-bit."""

import time

import numpy as np

from . import tensor as T
from .kan import KANBlock, KANLayer, KANLinear, MLPBlock, PatchEmbed, SplineGrid
from .model import ModelConfig, build
from .nn_layers import BagOfActivations, ConvBlock, SpatialAttention
from .objective import LossConfig, combined_loss
from .ssm import ClassicalMambaBlock, MambaKanBlock, SelectiveSSM

TOLERANCE = 1e-4
EPS = 1e-6


def _leaf(rng, shape, scale=1.0):
    return T.Tensor(T.kink_free(rng, shape, scale=scale), requires_grad=True)


def _module_case(module, inputs, call, rng, samples=None):
    """(f, leaves, samples) for a module: leaves are inputs then parameters."""
    head = {}

    def f(*leaves):
        out = call(*leaves[: len(inputs)])
        if "w" not in head:
            head["w"] = T.Tensor(rng.standard_normal(out.shape))
        return T.sum_(out * head["w"])

    return f, list(inputs) + module.parameters(), samples


def _case_conv_pool(rng):
    m = ConvBlock(2, 3, "pool", rng=rng, dtype="f64")
    x = _leaf(rng, (2, 2, 8, 8))
    return _module_case(m, [x], m, rng)


def _case_conv_interp(rng):
    m = ConvBlock(3, 2, "interp", rng=rng, dtype="f64")
    x = _leaf(rng, (2, 3, 4, 4))
    return _module_case(m, [x], m, rng)


def _case_attention(rng):
    m = SpatialAttention(rng=rng, dtype="f64")
    x = _leaf(rng, (2, 3, 6, 6))
    return _module_case(m, [x], m, rng)


def _case_boa(rng):
    m = BagOfActivations(dtype="f64")
    m.alphas.data[:] = rng.uniform(-1, 1, m.alphas.shape)
    x = _leaf(rng, (3, 4, 5))
    return _module_case(m, [x], m, rng)


def _case_kan_linear(rng):
    m = KANLinear(4, 3, SplineGrid(), rng=rng, dtype="f64")
    x = T.Tensor(rng.uniform(-1.3, 1.3, (5, 4)), requires_grad=True)
    return _module_case(m, [x], m, rng)


def _case_kan_layer(rng):
    m = KANLayer(4, rng=rng, dtype="f64")
    x = _leaf(rng, (2, 16, 4), 0.5)
    return _module_case(m, [x], lambda t: m(t, 4, 4), rng)


def _case_kan_block(rng):
    m = KANBlock(4, rng=rng, dtype="f64")
    x = _leaf(rng, (2, 16, 4), 0.5)
    return _module_case(m, [x], lambda t: m(t, 4, 4), rng)


def _case_patch_embed(rng):
    m = PatchEmbed(3, 5, rng=rng, dtype="f64")
    x = _leaf(rng, (2, 3, 8, 8))
    return _module_case(m, [x], lambda t: m(t)[0], rng)


def _case_scan(rng):
    N, L, E, S = 2, 7, 3, 4
    u = _leaf(rng, (N, L, E))
    delta = T.Tensor(rng.uniform(0.05, 1.0, (N, L, E)), requires_grad=True)
    A = T.Tensor(-rng.uniform(0.2, 2.0, (E, S)), requires_grad=True)
    B = _leaf(rng, (N, L, S))
    C = _leaf(rng, (N, L, S))
    D = _leaf(rng, (E,))
    w = T.Tensor(rng.standard_normal((N, L, E)))

    def f(*xs):
        return T.sum_(T.selective_scan(*xs) * w)

    return f, [u, delta, A, B, C, D], None


def _case_ssm(rng):
    m = SelectiveSSM(4, 3, rng=rng, dtype="f64")
    x = _leaf(rng, (2, 9, 4))
    return _module_case(m, [x], m, rng)


def _case_mamba_kan(rng):
    m = MambaKanBlock(3, 4, 3, SplineGrid(), "boa", "boa", rng=rng, dtype="f64")
    for bag in (m.act_main, m.act_gate):
        bag.alphas.data[:] = rng.uniform(0.1, 0.5, bag.alphas.shape)
    x = _leaf(rng, (2, 3, 8, 8))
    return _module_case(m, [x], m, rng, samples=24)


def _case_mamba_classical(rng):
    m = ClassicalMambaBlock(3, 4, 3, "silu", rng=rng, dtype="f64")
    x = _leaf(rng, (2, 3, 6, 6))
    return _module_case(m, [x], m, rng, samples=24)


def _case_mamba_classical_boa(rng):
    m = ClassicalMambaBlock(3, 4, 3, "boa", rng=rng, dtype="f64")
    x = _leaf(rng, (2, 3, 6, 6))
    return _module_case(m, [x], m, rng, samples=24)


def _case_mlp_block(rng):
    m = MLPBlock(4, rng=rng, dtype="f64")
    x = _leaf(rng, (2, 16, 4))
    return _module_case(m, [x], m, rng)


def _case_model(rng):
    model = build(ModelConfig(precision="f64", seed=int(rng.integers(1 << 31))))
    x = T.Tensor(rng.uniform(0, 1, (2, 3, 64, 64)), requires_grad=True)
    z = (rng.random((2, 1, 64, 64)) < 0.3).astype(np.float64)
    cfg = LossConfig()

    def f(*leaves):
        return combined_loss(cfg, model(leaves[0]), z)

    return f, [x] + model.parameters(), 2


def _case_loss(rng):
    logits = _leaf(rng, (2, 1, 4, 4), 2.0)
    z = (rng.random((2, 1, 4, 4)) < 0.5).astype(np.float64)
    cfg = LossConfig()
    return (lambda t: combined_loss(cfg, t, z)), [logits], None


CASES = {
    "conv_block_pool": _case_conv_pool,
    "conv_block_interp": _case_conv_interp,
    "spatial_attention": _case_attention,
    "bag_of_activations": _case_boa,
    "kan_linear": _case_kan_linear,
    "kan_layer": _case_kan_layer,
    "kan_block": _case_kan_block,
    "patch_embed": _case_patch_embed,
    "selective_scan": _case_scan,
    "selective_ssm": _case_ssm,
    "mamba_kan_block": _case_mamba_kan,
    "classical_mamba_block": _case_mamba_classical,
    "classical_mamba_block_boa": _case_mamba_classical_boa,
    "mlp_block": _case_mlp_block,
    "full_model": _case_model,
    "combined_loss": _case_loss,
}


def check_case(name, seed=0, eps=EPS):
    rng = np.random.default_rng(np.random.SeedSequence([seed, list(CASES).index(name)]))
    with T.precision("f64"):
        f, leaves, samples = CASES[name](rng)
        return T.grad_check(f, leaves, eps=eps, samples=samples, seed=seed)


def run_suite(names=None, seed=0, eps=EPS, report=None):
    """Max relative gradient error per layer, as ``{name: error}``."""
    results = {}
    for name in names or CASES:
        t0 = time.perf_counter()
        results[name] = check_case(name, seed, eps)
        if report:
            report(name, results[name], time.perf_counter() - t0)
    return results
