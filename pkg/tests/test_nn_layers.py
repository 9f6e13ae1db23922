import numpy as np
import pytest
from scipy.signal import correlate2d

from kmfusion import tensor as T
from kmfusion.nn_layers import (
    BOA_MEMBERS,
    Activation,
    BagOfActivations,
    BatchNorm2d,
    ConvBlock,
    Linear,
    Module,
    SpatialAttention,
    conv_block,
    dwconv_block,
    make_activation,
)
from kmfusion.tensor import DimensionError, Tensor


class Pair(Module):
    def __init__(self):
        super().__init__()
        self.a = Linear(3, 2)
        self.bn = BatchNorm2d(2)
        self.rest = [Linear(2, 2), Linear(2, 1)]


def test_registry_order_and_names():
    names = [n for n, _ in Pair().named_parameters()]
    assert names == ["a.weight", "bn.gamma", "bn.beta", "rest.0.weight", "rest.1.weight"]
    assert [n for n, _ in Pair().named_buffers()] == ["bn.running_mean", "bn.running_var"]


def test_state_dict_round_trip():
    src, dst = Pair(), Pair()
    for p in src.parameters():
        p.data[...] = np.random.default_rng(0).standard_normal(p.shape)
    src.bn.running_mean[:] = 3.0
    dst.load_state_dict(src.state_dict())
    for (n, a), (_, b) in zip(src.state_dict().items(), dst.state_dict().items()):
        assert np.array_equal(a, b), n


def test_load_state_dict_rejects_bad_shape():
    state = Pair().state_dict()
    state["a.weight"] = np.zeros((5, 5))
    with pytest.raises(DimensionError, match="a.weight"):
        Pair().load_state_dict(state)


def test_train_eval_propagates():
    m = Pair().eval()
    assert not m.bn.training
    m.train()
    assert m.bn.training


def test_astype_casts_parameters_and_buffers():
    m = Pair().astype("f64")
    assert all(p.data.dtype == np.float64 for p in m.parameters())
    assert m.bn.running_var.dtype == np.float64


def test_boa_initial_weights_and_formula(rng, f64):
    bag = BagOfActivations()
    assert np.array_equal(bag.alphas.data, np.full(5, 0.2))
    bag.alphas.data[:] = [0.5, -1.0, 2.0, 0.25, 1.5]
    x = rng.standard_normal((2, 7))
    want = sum(a * Activation(k)(Tensor(x)).data for a, k in zip(bag.alphas.data, BOA_MEMBERS))
    np.testing.assert_allclose(bag(Tensor(x)).data, want, atol=1e-12)


def test_boa_one_hot_equals_member(rng, f64):
    x = Tensor(rng.standard_normal((3, 4)))
    for i, kind in enumerate(BOA_MEMBERS):
        bag = BagOfActivations()
        bag.alphas.data[:] = np.eye(5)[i]
        np.testing.assert_allclose(bag(x).data, Activation(kind)(x).data, atol=1e-15)


def test_make_activation():
    assert isinstance(make_activation("boa"), BagOfActivations)
    assert make_activation("relu").kind == "relu"
    with pytest.raises(ValueError):
        make_activation("swishy")


def test_spatial_attention_oracle(rng, f64):
    sa = SpatialAttention(rng=rng, dtype="f64")
    sa.bias.data[:] = 0.3
    F = rng.standard_normal((1, 4, 9, 9))
    pooled = [F[0].mean(axis=0), F[0].max(axis=0)]
    k = sa.kernel.data[0]
    logits = sum(correlate2d(np.pad(pooled[c], 3), k[c], mode="valid") for c in range(2)) + 0.3
    m = 1 / (1 + np.exp(-logits))
    np.testing.assert_allclose(sa.attention_map(Tensor(F)).data[0, 0], m, atol=1e-12)
    np.testing.assert_allclose(sa(Tensor(F)).data, F * m, atol=1e-12)


def test_spatial_attention_map_range(rng):
    m = SpatialAttention(rng=rng).attention_map(Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32)))
    assert m.shape == (2, 1, 8, 8)
    assert np.all((m.data > 0) & (m.data < 1))


def test_conv_block_shapes(rng):
    x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
    assert conv_block(3, 5, rng=rng)(x).shape == (2, 5, 4, 4)
    assert dwconv_block(3, 5, rng=rng)(x).shape == (2, 5, 16, 16)
    with pytest.raises(DimensionError):
        conv_block(4, 5)(x)
    with pytest.raises(ValueError):
        ConvBlock(3, 5, "stride")


def test_batch_norm_module_eval_uses_running_stats(rng):
    bn = BatchNorm2d(2, dtype="f64")
    x = Tensor(rng.standard_normal((4, 2, 3, 3)) + 5)
    bn(x)
    assert np.all(bn.running_mean > 0.4)
    bn.eval()
    want = (x.data - bn.running_mean[:, None, None]) / np.sqrt(bn.running_var[:, None, None] + 1e-5)
    np.testing.assert_allclose(bn(x).data, want, atol=1e-12)
