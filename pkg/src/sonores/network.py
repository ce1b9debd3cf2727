"""Residual classification network: stem, four stages, pooled sigmoid head.

Architecture: 7x7/2 conv + batch norm + ReLU + 3x3/2 max pool, then four
stages of residual blocks (basic: two 3x3 convs; bottleneck: 1x1-3x3-1x1
with 4x expansion), global average pooling, dense+ReLU, dropout, dense(1),
sigmoid. Stage 1 keeps the stem resolution; stages 2-4 halve it.

Stages can be frozen for transfer-style fine-tuning: frozen parameters are
excluded from gradients and optimizer updates, and frozen batch-norm
layers normalize with their running statistics in every mode and never
update them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from sonores.tensor import (
    Tensor,
    ShapeMismatchError,
    add,
    conv2d,
    dense,
    global_avg_pool2d,
    max_pool2d,
    record_op,
    relu,
    reshape,
    sigmoid,
)

STAGE_NAMES = ("stem", "stage1", "stage2", "stage3", "stage4")
FREEZABLE_SECTIONS = STAGE_NAMES + ("head",)
BOTTLENECK_EXPANSION = 4


@dataclass
class NetworkConfig:
    """Declarative description of the residual architecture."""

    input_channels: int = 3
    input_size: int = 224
    block_kind: str = "bottleneck"
    stage_depths: tuple = (3, 4, 6, 3)
    stage_widths: tuple = (64, 128, 256, 512)
    dense_units: int = 256
    dropout_rate: float = 0.3
    frozen_stages: frozenset = field(default_factory=lambda: frozenset({"stem", "stage1", "stage2"}))
    seed: int = 0

    def validate(self):
        if self.block_kind not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block kind {self.block_kind!r}")
        if len(self.stage_depths) != 4 or len(self.stage_widths) != 4:
            raise ValueError("exactly four stages are required")
        if any(d < 1 for d in self.stage_depths) or any(w < 1 for w in self.stage_widths):
            raise ValueError("stage depths and widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        if self.input_size < 16 or self.input_size % 16 != 0:
            raise ValueError(
                f"input size {self.input_size} is not evenly reducible through the "
                "stem and stage strides (must be a multiple of 16, at least 16)"
            )
        unknown = set(self.frozen_stages) - set(FREEZABLE_SECTIONS)
        if unknown:
            raise ValueError(f"unknown stage names in frozen set: {sorted(unknown)}")
        if self.input_channels < 1 or self.dense_units < 1:
            raise ValueError("input_channels and dense_units must be positive")


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running normalization statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    frozen: bool = False


def batch_norm(x: Tensor, bn: BatchNormState, training: bool) -> Tensor:
    """Channel-wise normalization over an NCHW tensor.

    Training mode normalizes with the batch's population statistics and
    folds them into the running estimates; eval mode (and any frozen
    layer) uses the running statistics unchanged.
    """
    use_batch_stats = training and not bn.frozen
    if use_batch_stats:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = bn.momentum
        bn.running_mean = (1.0 - m) * bn.running_mean + m * mean
        bn.running_var = (1.0 - m) * bn.running_var + m * var
    else:
        mean = bn.running_mean.astype(x.data.dtype)
        var = bn.running_var.astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + bn.epsilon)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(bn.gamma.data[None, :, None, None] * xhat + bn.beta.data[None, :, None, None])
    gamma, beta = bn.gamma, bn.beta
    n_per_chan = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    def grads(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if use_batch_stats:
                mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = inv_std[None, :, None, None] * (gxhat - mean_g - xhat * mean_gx)
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, gg, gb

    del n_per_chan
    return record_op("batch_norm", out, (x, gamma, beta), grads)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted-scaling dropout; eval mode is the identity."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    out = Tensor(x.data * keep)

    def grads(g):
        return (g * keep if x.requires_grad else None,)

    return record_op("dropout", out, (x,), grads)


class ConvLayer:
    def __init__(self, kernel: Tensor, stride: int, padding: int):
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, stride=self.stride, padding=self.padding)


class ResidualBlock:
    """ReLU(F(x) + shortcut(x)); projection shortcut when shape changes."""

    def __init__(self, convs, bns, projection):
        self.convs = convs          # list of ConvLayer
        self.bns = bns              # list of BatchNormState, parallel to convs
        self.projection = projection  # (ConvLayer, BatchNormState) or None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = x
        last = len(self.convs) - 1
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            out = batch_norm(conv(out), bn, training)
            if i != last:
                out = relu(out)
        if self.projection is not None:
            pconv, pbn = self.projection
            shortcut = batch_norm(pconv(x), pbn, training)
        else:
            if x.data.shape != out.data.shape:
                raise ShapeMismatchError(
                    f"identity shortcut needs matching shapes, got {x.data.shape} vs {out.data.shape}"
                )
            shortcut = x
        return relu(add(out, shortcut))


class Network:
    """Instantiated parameterized network.

    Parameters live in ``params`` (name -> Tensor); ``trainable`` holds the
    per-parameter flag mirrored into each tensor's ``requires_grad``.
    Batch-norm running statistics are reachable through ``bn_states``.
    """

    def __init__(self, cfg: NetworkConfig, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.trainable: dict[str, bool] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        self.dropout_rate = cfg.dropout_rate
        self._rng = np.random.default_rng(cfg.seed)
        self._build()
        self.set_frozen(cfg.frozen_stages)

    # -- construction -----------------------------------------------------

    def _he_normal(self, shape, fan_in):
        std = np.sqrt(2.0 / fan_in)
        return (self._rng.standard_normal(shape) * std).astype(self.dtype)

    def _new_conv(self, name, out_ch, in_ch, k, stride, padding) -> ConvLayer:
        kernel = Tensor(self._he_normal((out_ch, in_ch, k, k), in_ch * k * k), requires_grad=True)
        self.params[f"{name}.kernel"] = kernel
        return ConvLayer(kernel, stride, padding)

    def _new_bn(self, name, channels) -> BatchNormState:
        gamma = Tensor(np.ones(channels, dtype=self.dtype), requires_grad=True)
        beta = Tensor(np.zeros(channels, dtype=self.dtype), requires_grad=True)
        self.params[f"{name}.gamma"] = gamma
        self.params[f"{name}.beta"] = beta
        bn = BatchNormState(
            gamma=gamma,
            beta=beta,
            running_mean=np.zeros(channels, dtype=self.dtype),
            running_var=np.ones(channels, dtype=self.dtype),
        )
        self.bn_states[name] = bn
        return bn

    def _new_dense(self, name, in_features, units):
        weight = Tensor(self._he_normal((in_features, units), in_features), requires_grad=True)
        bias = Tensor(np.zeros(units, dtype=self.dtype), requires_grad=True)
        self.params[f"{name}.weight"] = weight
        self.params[f"{name}.bias"] = bias
        return weight, bias

    def _new_block(self, name, in_ch, width, stride, kind) -> ResidualBlock:
        if kind == "basic":
            out_ch = width
            specs = [(width, in_ch, 3, stride, 1), (width, width, 3, 1, 1)]
        else:
            out_ch = width * BOTTLENECK_EXPANSION
            specs = [
                (width, in_ch, 1, 1, 0),
                (width, width, 3, stride, 1),
                (out_ch, width, 1, 1, 0),
            ]
        convs, bns = [], []
        for i, (oc, ic, k, s, p) in enumerate(specs, start=1):
            convs.append(self._new_conv(f"{name}.conv{i}", oc, ic, k, s, p))
            bns.append(self._new_bn(f"{name}.bn{i}", oc))
        projection = None
        if stride != 1 or in_ch != out_ch:
            pconv = self._new_conv(f"{name}.proj", out_ch, in_ch, 1, stride, 0)
            pbn = self._new_bn(f"{name}.proj_bn", out_ch)
            projection = (pconv, pbn)
        return ResidualBlock(convs, bns, projection)

    def _build(self):
        cfg = self.cfg
        stem_width = cfg.stage_widths[0]
        self.stem_conv = self._new_conv("stem.conv", stem_width, cfg.input_channels, 7, 2, 3)
        self.stem_bn = self._new_bn("stem.bn", stem_width)
        self.stages: list[list[ResidualBlock]] = []
        in_ch = stem_width
        for s, (depth, width) in enumerate(zip(cfg.stage_depths, cfg.stage_widths), start=1):
            blocks = []
            for b in range(depth):
                stride = 2 if (s > 1 and b == 0) else 1
                block = self._new_block(f"stage{s}.block{b}", in_ch, width, stride, cfg.block_kind)
                in_ch = width * (BOTTLENECK_EXPANSION if cfg.block_kind == "bottleneck" else 1)
                blocks.append(block)
            self.stages.append(blocks)
        self.feature_channels = in_ch
        self.dense1_w, self.dense1_b = self._new_dense("head.dense1", in_ch, cfg.dense_units)
        self.dense2_w, self.dense2_b = self._new_dense("head.dense2", cfg.dense_units, 1)
        for name in self.params:
            self.trainable[name] = True

    # -- freezing ----------------------------------------------------------

    def set_frozen(self, stages: Iterable[str]) -> "Network":
        """Mark the named sections untrainable; everything else trainable."""
        frozen = frozenset(stages)
        unknown = frozen - set(FREEZABLE_SECTIONS)
        if unknown:
            raise ValueError(
                f"unknown stage names {sorted(unknown)}; valid names: {list(FREEZABLE_SECTIONS)}"
            )
        self.frozen_stages = frozen
        for name, p in self.params.items():
            stage = name.split(".", 1)[0]
            flag = stage not in frozen
            self.trainable[name] = flag
            p.requires_grad = flag
        for name, bn in self.bn_states.items():
            bn.frozen = name.split(".", 1)[0] in frozen
        return self

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if self.trainable[n]}

    def clear_grads(self):
        for p in self.params.values():
            p.grad = None

    # -- forward -----------------------------------------------------------

    def forward_detailed(
        self,
        x: Tensor,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        capture: tuple = (),
    ):
        """Run the network, returning (probabilities, logits, captured activations).

        ``capture`` names feature maps to expose: "stem" or "stageN" yields
        the post-activation output of that section.
        """
        if x.data.ndim != 4 or x.data.shape[1] != self.cfg.input_channels:
            raise ShapeMismatchError(
                f"expected NCHW input with {self.cfg.input_channels} channels, got {x.data.shape}"
            )
        for name in capture:
            if name not in STAGE_NAMES:
                raise ValueError(
                    f"unknown capture layer {name!r}; valid names: {list(STAGE_NAMES)}"
                )
        caps: dict[str, Tensor] = {}
        out = relu(batch_norm(self.stem_conv(x), self.stem_bn, training))
        out = max_pool2d(out, window=3, stride=2, padding=1)
        if "stem" in capture:
            caps["stem"] = out
        for s, blocks in enumerate(self.stages, start=1):
            for block in blocks:
                out = block(out, training)
            if f"stage{s}" in capture:
                caps[f"stage{s}"] = out
        pooled = reshape(global_avg_pool2d(out), (out.data.shape[0], self.feature_channels))
        hidden = relu(dense(pooled, self.dense1_w, self.dense1_b))
        hidden = dropout(hidden, self.dropout_rate, rng, training)
        logits = dense(hidden, self.dense2_w, self.dense2_b)
        return sigmoid(logits), logits, caps

    def forward(
        self,
        x: Tensor,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Probabilities in (0,1), shape (N, 1)."""
        probs, _, _ = self.forward_detailed(x, training=training, rng=rng)
        return probs


def build_network(cfg: NetworkConfig, dtype=np.float32) -> Network:
    """Instantiate a network with seeded fan-in-scaled normal initialization."""
    return Network(cfg, dtype=dtype)


def residual_block_forward(x: Tensor, block: ResidualBlock, training: bool = False) -> Tensor:
    """Forward one residual block outside a full network."""
    return block(x, training)
