import numpy as np
import pytest

from sonores.network import (
    BatchNormState,
    Network,
    NetworkConfig,
    batch_norm,
    build_network,
    dropout,
    residual_block_forward,
)
from sonores.tensor import ShapeMismatchError, Tape, Tensor, backward, tsum


def tiny_cfg(**overrides):
    base = dict(
        input_channels=3,
        input_size=64,
        block_kind="basic",
        stage_depths=(1, 1, 1, 1),
        stage_widths=(8, 16, 32, 64),
        dense_units=16,
        dropout_rate=0.3,
        frozen_stages=frozenset(),
        seed=7,
    )
    base.update(overrides)
    return NetworkConfig(**base)


def test_resnet50_arrangement_forward_shape():
    cfg = NetworkConfig(
        block_kind="bottleneck",
        stage_depths=(3, 4, 6, 3),
        stage_widths=(64, 128, 256, 512),
        seed=1,
    )
    net = build_network(cfg)
    # 53 conv kernels: stem + 48 block convs + 4 projections
    kernels = [n for n in net.params if n.endswith(".kernel")]
    assert len(kernels) == 53
    assert net.feature_channels == 2048
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 224, 224)).astype(np.float32))
    probs = net.forward(x)
    assert probs.data.shape == (1, 1)
    assert 0.0 < probs.item() < 1.0


def test_desk_scale_forward_in_unit_interval():
    net = build_network(tiny_cfg())
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 64, 64)).astype(np.float32))
    probs = net.forward(x)
    assert probs.data.shape == (2, 1)
    assert np.all(probs.data > 0.0) and np.all(probs.data < 1.0)


def test_identical_config_builds_identical_parameters():
    a = build_network(tiny_cfg())
    b = build_network(tiny_cfg())
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data), name


def test_forward_determinism_eval_mode():
    net = build_network(tiny_cfg())
    x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 64, 64)).astype(np.float32))
    out1 = net.forward(x).data.copy()
    out2 = net.forward(x).data.copy()
    assert np.array_equal(out1, out2)


def test_input_size_not_reducible_rejected():
    with pytest.raises(ValueError):
        build_network(tiny_cfg(input_size=50))
    with pytest.raises(ValueError):
        build_network(tiny_cfg(input_size=8))


def test_bad_capture_and_freeze_names_rejected():
    net = build_network(tiny_cfg())
    with pytest.raises(ValueError) as exc:
        net.set_frozen({"stage9"})
    assert "stage9" in str(exc.value)
    x = Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
    with pytest.raises(ValueError):
        net.forward_detailed(x, capture=("conv_weird",))


def test_wrong_channel_count_rejected():
    net = build_network(tiny_cfg())
    with pytest.raises(ShapeMismatchError):
        net.forward(Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32)))


class TestResidualBlock:
    def zeroed_block(self, net):
        block = net.stages[0][0]  # stage1 block0: identity shortcut in basic nets
        assert block.projection is None
        for conv in block.convs:
            conv.kernel.data = np.zeros_like(conv.kernel.data)
        return block

    def test_zero_branch_collapses_to_relu(self):
        net = build_network(tiny_cfg(stage_widths=(8, 8, 8, 8)))
        block = self.zeroed_block(net)
        x = Tensor(np.random.default_rng(3).normal(size=(2, 8, 16, 16)).astype(np.float32))
        out = residual_block_forward(x, block, training=False)
        assert np.allclose(out.data, np.maximum(x.data, 0.0), atol=1e-6)

    def test_gradient_flows_through_skip(self):
        net = build_network(tiny_cfg(stage_widths=(8, 8, 8, 8)))
        block = self.zeroed_block(net)
        x = Tensor(
            np.abs(np.random.default_rng(4).normal(size=(1, 8, 8, 8))) + 0.1,
            requires_grad=True,
        )
        with Tape() as tape:
            out = residual_block_forward(x, block, training=False)
            backward(tape, tsum(out))
        assert np.allclose(x.grad, 1.0, atol=1e-6)

    def test_projection_block_halves_spatial_dims(self):
        net = build_network(tiny_cfg(stage_widths=(8, 16, 32, 64)))
        block = net.stages[1][0]  # stage2 block0: stride 2, 8 -> 16 channels
        assert block.projection is not None
        x = Tensor(np.random.default_rng(5).normal(size=(1, 8, 8, 8)).astype(np.float32))
        out = residual_block_forward(x, block, training=False)
        assert out.data.shape == (1, 16, 4, 4)

    def test_identity_shortcut_shape_mismatch_rejected(self):
        net = build_network(tiny_cfg(stage_widths=(8, 8, 8, 8)))
        block = net.stages[0][0]
        block.convs[1].kernel.data = np.zeros((4, 8, 3, 3), dtype=np.float32)
        block.bns[1].gamma.data = np.zeros(4, dtype=np.float32)
        block.bns[1].beta.data = np.zeros(4, dtype=np.float32)
        block.bns[1].running_mean = np.zeros(4, dtype=np.float32)
        block.bns[1].running_var = np.ones(4, dtype=np.float32)
        x = Tensor(np.zeros((1, 8, 8, 8), dtype=np.float32))
        with pytest.raises(ShapeMismatchError):
            residual_block_forward(x, block, training=False)


class TestFreezing:
    def test_flags_follow_sections(self):
        net = build_network(tiny_cfg())
        net.set_frozen({"stem", "stage1", "stage2"})
        assert not net.params["stem.conv.kernel"].requires_grad
        assert not net.trainable["stage2.block0.conv1.kernel"]
        assert net.trainable["stage3.block0.conv1.kernel"]
        assert net.trainable["head.dense1.weight"]
        assert net.bn_states["stage1.block0.bn1"].frozen
        assert not net.bn_states["stage4.block0.bn1"].frozen

    def test_frozen_bn_keeps_running_stats_in_train_mode(self):
        net = build_network(tiny_cfg())
        net.set_frozen({"stem"})
        bn = net.bn_states["stem.bn"]
        before = bn.running_mean.copy()
        x = Tensor(np.random.default_rng(6).normal(size=(4, 3, 64, 64)).astype(np.float32))
        net.forward(x, training=True, rng=np.random.default_rng(0))
        assert np.array_equal(bn.running_mean, before)
        unfrozen = net.bn_states["stage1.block0.bn1"]
        assert not np.array_equal(unfrozen.running_mean, np.zeros_like(unfrozen.running_mean))


class TestBatchNorm:
    def test_train_mode_normalizes_batch(self):
        rng = np.random.default_rng(8)
        c = 5
        x = Tensor(rng.normal(loc=3.0, scale=2.0, size=(8, c, 6, 6)).astype(np.float32))
        bn = BatchNormState(
            gamma=Tensor(np.ones(c, dtype=np.float32)),
            beta=Tensor(np.zeros(c, dtype=np.float32)),
            running_mean=np.zeros(c, dtype=np.float32),
            running_var=np.ones(c, dtype=np.float32),
        )
        out = batch_norm(x, bn, training=True)
        mu = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.all(np.abs(mu) <= 1e-5)
        assert np.all(np.abs(var - 1.0) <= 1e-4)

    def test_eval_mode_uses_running_stats(self):
        c = 2
        bn = BatchNormState(
            gamma=Tensor(np.full(c, 2.0, dtype=np.float32)),
            beta=Tensor(np.full(c, 1.0, dtype=np.float32)),
            running_mean=np.array([1.0, -1.0], dtype=np.float32),
            running_var=np.array([4.0, 0.25], dtype=np.float32),
        )
        x = Tensor(np.ones((1, c, 1, 1), dtype=np.float32))
        out = batch_norm(x, bn, training=False)
        expect = 2.0 * (1.0 - bn.running_mean) / np.sqrt(bn.running_var + 1e-5) + 1.0
        assert np.allclose(out.data.reshape(-1), expect, atol=1e-5)


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.random.default_rng(9).normal(size=(4, 10)).astype(np.float32))
        out = dropout(x, 0.3, None, training=False)
        assert out is x

    def test_inverted_scaling_preserves_mean(self):
        rng = np.random.default_rng(10)
        x = Tensor(np.full((1, 64), 3.0, dtype=np.float32))
        total = np.zeros_like(x.data)
        n = 10_000
        for _ in range(n):
            total += dropout(x, 0.3, rng, training=True).data
        mean = total / n
        assert np.abs(mean.mean() - 3.0) / 3.0 <= 0.02
