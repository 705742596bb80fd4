"""The four-variant U-shaped landmark extraction network.

Canonical topology (nine convolution layers; spatial sizes for a 192x192
input, channel widths for the default sequence [5, 13, 89, 233]):

  layer 1  at 192: 3x3 conv 3->5, BN, ReLU.  Dilation/Proposed run three
           such kernels in parallel with dilation rates [2, 3, 5] and
           concatenate their outputs (15 channels); Plain/Residual run one
           kernel with dilation 1 (5 channels).
  layer 2  pool -> 96, 3x3 conv -> 13, BN, ReLU
  layer 3  pool -> 48, 3x3 conv -> 89, BN, ReLU
  layer 4  pool -> 24, 3x3 conv -> 233, BN, ReLU   (bottleneck activation)
  layer 5  upsample -> 48, concat activation 3 (skip variants), conv -> 89, ReLU
  layer 6  upsample -> 96, concat activation 2 (skip variants), conv -> 13, ReLU
  layer 7  upsample -> 192, concat activation 1 (skip variants), conv -> 5, ReLU
  layer 8  1x1 conv 5->5, ReLU
  layer 9  1x1 conv 5->1, sigmoid

Batch normalization exists in layers 1-4 only. Dropout defaults to rates
0.1 / 0.5 / 0.3 after activations 4 / 5 / 6. Residual and Proposed carry
the three skip concatenations; Dilation and Proposed carry the parallel
dilated first layer. Activations therefore run 192-96-48-24-48-96-192.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .seeding import derive_rng


class Variant(str, enum.Enum):
    PLAIN = "plain"
    DILATION = "dilation"
    RESIDUAL = "residual"
    PROPOSED = "proposed"

    @property
    def has_pyramid(self) -> bool:
        return self in (Variant.DILATION, Variant.PROPOSED)

    @property
    def has_skips(self) -> bool:
        return self in (Variant.RESIDUAL, Variant.PROPOSED)


VARIANT_NAMES = tuple(v.value for v in Variant)


def parse_variant(name) -> Variant:
    if isinstance(name, Variant):
        return name
    try:
        return Variant(str(name).lower())
    except ValueError:
        raise ConfigError(
            f"unknown variant {name!r}; expected one of: {', '.join(VARIANT_NAMES)}"
        ) from None


@dataclass(frozen=True)
class GraphConfig:
    """Structural hyperparameters shared by all variants."""

    input_size: tuple = (192, 192)
    input_channels: int = 3
    channel_sequence: tuple = (5, 13, 89, 233)
    dilation_rates: tuple = (2, 3, 5)
    dropout_schedule: tuple = ((4, 0.1), (5, 0.5), (6, 0.3))
    loss: str = "bce"
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    seed: int = 0

    def violations(self, variant: Variant) -> list:
        """Every violated invariant as a human-readable string."""
        bad = []
        h, w = self.input_size
        if h % 8 or w % 8:
            bad.append(f"input size {h}x{w} must be divisible by 8 (three 2x poolings)")
        if h < 8 or w < 8:
            bad.append(f"input size {h}x{w} too small for three poolings")
        if self.input_channels < 1:
            bad.append(f"input_channels must be >= 1, got {self.input_channels}")
        if len(self.channel_sequence) != 4:
            bad.append(
                f"channel_sequence needs exactly 4 entries, got {len(self.channel_sequence)}"
            )
        if any(int(c) < 1 for c in self.channel_sequence):
            bad.append(f"channel_sequence entries must be >= 1, got {self.channel_sequence}")
        if variant.has_pyramid:
            if len(self.dilation_rates) != 3:
                bad.append(
                    f"dilation_rates needs exactly 3 entries for {variant.value}, "
                    f"got {len(self.dilation_rates)}"
                )
            if any(int(d) < 1 for d in self.dilation_rates):
                bad.append(f"dilation rates must be >= 1, got {self.dilation_rates}")
        for idx, rate in self.dropout_schedule:
            if not 1 <= int(idx) <= 7:
                bad.append(f"dropout index {idx} outside activation range 1..7")
            if not 0.0 <= float(rate) < 1.0:
                bad.append(f"dropout rate {rate} outside [0, 1)")
        if self.loss not in ops.LOSSES:
            bad.append(f"loss must be one of {sorted(ops.LOSSES)}, got {self.loss!r}")
        if not 0.0 < self.bn_momentum < 1.0:
            bad.append(f"bn_momentum must lie in (0, 1), got {self.bn_momentum}")
        if not self.bn_epsilon > 0.0:
            bad.append(f"bn_epsilon must be positive, got {self.bn_epsilon}")
        return bad


@dataclass(frozen=True)
class ConvSpec:
    """One convolution kernel in the plan."""

    name: str
    layer: int
    in_channels: int
    out_channels: int
    kernel: int
    dilation: int
    has_bn: bool


@dataclass(frozen=True)
class LayerPlan:
    branches: tuple          # layer 1 (one entry, or three for the pyramid)
    encoder: tuple           # layers 2..4 (preceded by maxpool)
    decoder: tuple           # layers 5..7 (preceded by upsample [+ concat])
    tail: tuple              # layers 8..9 (1x1 kernels)
    skips: tuple             # (decoder_layer, source_activation) pairs
    act1_channels: int

    @property
    def all_convs(self) -> tuple:
        return self.branches + self.encoder + self.decoder + self.tail


# decoder layer -> the encoder activation concatenated into it (skip variants)
SKIP_WIRING = ((5, 3), (6, 2), (7, 1))


def layer_plan(variant: Variant, config: GraphConfig) -> LayerPlan:
    c1, c2, c3, c4 = (int(c) for c in config.channel_sequence)
    cin = config.input_channels
    if variant.has_pyramid:
        branches = tuple(
            ConvSpec(f"l1b{i}", 1, cin, c1, 3, int(d), True)
            for i, d in enumerate(config.dilation_rates)
        )
        a1 = c1 * len(branches)
    else:
        branches = (ConvSpec("l1", 1, cin, c1, 3, 1, True),)
        a1 = c1
    encoder = (
        ConvSpec("l2", 2, a1, c2, 3, 1, True),
        ConvSpec("l3", 3, c2, c3, 3, 1, True),
        ConvSpec("l4", 4, c3, c4, 3, 1, True),
    )
    skip_extra = {5: c3, 6: c2, 7: a1} if variant.has_skips else {5: 0, 6: 0, 7: 0}
    decoder = (
        ConvSpec("l5", 5, c4 + skip_extra[5], c3, 3, 1, False),
        ConvSpec("l6", 6, c3 + skip_extra[6], c2, 3, 1, False),
        ConvSpec("l7", 7, c2 + skip_extra[7], c1, 3, 1, False),
    )
    tail = (
        ConvSpec("l8", 8, c1, c1, 1, 1, False),
        ConvSpec("l9", 9, c1, 1, 1, 1, False),
    )
    skips = SKIP_WIRING if variant.has_skips else ()
    return LayerPlan(branches, encoder, decoder, tail, skips, a1)


class ModelGraph:
    """A built network: plan plus parameter and statistics tensors.

    params maps names like "l2.w" / "l1b0.gamma" to arrays; stats holds the
    batchnorm running statistics. Both dicts are flat so the optimizer and
    the checkpoint code can treat them uniformly.
    """

    def __init__(self, variant: Variant, config: GraphConfig, dtype=np.float32):
        self.variant = variant
        self.config = config
        self.dtype = np.dtype(dtype)
        self.plan = layer_plan(variant, config)
        self.params: dict = {}
        self.stats: dict = {}
        for spec in self.plan.all_convs:
            self.params[f"{spec.name}.w"] = np.zeros(
                (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), dtype=self.dtype
            )
            self.params[f"{spec.name}.b"] = np.zeros(spec.out_channels, dtype=self.dtype)
            if spec.has_bn:
                self.params[f"{spec.name}.gamma"] = np.ones(spec.out_channels, dtype=self.dtype)
                self.params[f"{spec.name}.beta"] = np.zeros(spec.out_channels, dtype=self.dtype)
                self.stats[f"{spec.name}.running_mean"] = np.zeros(spec.out_channels, dtype=self.dtype)
                self.stats[f"{spec.name}.running_var"] = np.ones(spec.out_channels, dtype=self.dtype)

    # -- introspection ----------------------------------------------------

    def conv_layer_count(self) -> int:
        """Number of convolution layers (the parallel first layer counts once)."""
        layers = {spec.layer for spec in self.plan.all_convs}
        return len(layers)

    def parallel_kernels(self) -> int:
        return len(self.plan.branches)

    def skip_edges(self) -> tuple:
        return self.plan.skips

    def bn_layers(self) -> tuple:
        return tuple(sorted({s.layer for s in self.plan.all_convs if s.has_bn}))

    def dropout_placement(self) -> tuple:
        return tuple((int(i), float(r)) for i, r in self.config.dropout_schedule)

    def param_count(self) -> int:
        """Graph-walk count over conv weights, biases, gamma and beta."""
        return sum(int(p.size) for p in self.params.values())

    def layer_param_counts(self) -> list:
        """Per conv-spec parameter tallies for reporting."""
        rows = []
        for spec in self.plan.all_convs:
            n = self.params[f"{spec.name}.w"].size + self.params[f"{spec.name}.b"].size
            if spec.has_bn:
                n += self.params[f"{spec.name}.gamma"].size + self.params[f"{spec.name}.beta"].size
            rows.append((spec, int(n)))
        return rows

    # -- helpers ----------------------------------------------------------

    def _conv_params(self, spec: ConvSpec) -> ops.ConvParams:
        return ops.ConvParams(
            self.params[f"{spec.name}.w"], self.params[f"{spec.name}.b"], spec.dilation
        )

    def _bn_state(self, spec: ConvSpec) -> ops.BatchNormState:
        return ops.BatchNormState(
            gamma=self.params[f"{spec.name}.gamma"],
            beta=self.params[f"{spec.name}.beta"],
            running_mean=self.stats[f"{spec.name}.running_mean"],
            running_var=self.stats[f"{spec.name}.running_var"],
            momentum=self.config.bn_momentum,
            epsilon=self.config.bn_epsilon,
        )

    def astype(self, dtype) -> "ModelGraph":
        """Copy of this graph with all tensors cast to `dtype`."""
        other = ModelGraph(self.variant, self.config, dtype=dtype)
        for k, v in self.params.items():
            other.params[k] = v.astype(dtype)
        for k, v in self.stats.items():
            other.stats[k] = v.astype(dtype)
        return other

    # -- forward / backward ----------------------------------------------

    def _dropout_rates(self) -> dict:
        return {int(i): float(r) for i, r in self.config.dropout_schedule}

    def forward(self, batch: np.ndarray, mode: str, rng: np.random.Generator | None = None,
                freeze_bn: bool = False):
        """Run the network; returns (prediction, cache).

        mode is "train" (batch statistics, dropout active, cache usable for
        backward) or "eval" (running statistics, dropout off, deterministic).
        freeze_bn makes a train-mode pass normalize with the stored running
        statistics without updating them, which keeps the output independent
        of micro-batch boundaries.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"forward mode must be 'train' or 'eval', got {mode!r}")
        ops._require_4d("forward batch", batch)
        n, c, h, w = batch.shape
        eh, ew = self.config.input_size
        if c != self.config.input_channels or (h, w) != (eh, ew):
            raise ShapeError(
                f"batch shape {batch.shape} does not match configured input "
                f"(n, {self.config.input_channels}, {eh}, {ew})"
            )
        if mode == "train" and n < 2:
            raise ShapeError("train-mode forward needs a batch of at least 2 samples")
        drop = self._dropout_rates() if mode == "train" else {}
        if mode == "train" and any(r > 0 for r in drop.values()) and rng is None:
            raise ValueError("train-mode forward needs an rng for dropout")
        x = batch.astype(self.dtype, copy=False)
        bn_mode = "eval" if (mode == "eval" or freeze_bn) else "train"

        cache = {
            "mode": mode, "bn_mode": bn_mode, "input": x,
            "bn": {}, "relu_out": {}, "conv_in": {},
            "act": {}, "drop_mask": {}, "pool": {}, "concat_first": {},
        }

        def conv_bn_relu(inp, spec):
            cache["conv_in"][spec.name] = inp
            z = ops.conv2d(inp, self._conv_params(spec))
            if spec.has_bn:
                state = self._bn_state(spec)
                z, bncache = ops.batchnorm(z, state, bn_mode)
                if bn_mode == "train":
                    self.stats[f"{spec.name}.running_mean"] = state.running_mean
                    self.stats[f"{spec.name}.running_var"] = state.running_var
                cache["bn"][spec.name] = bncache
            a = ops.relu(z)
            cache["relu_out"][spec.name] = a
            return a

        def apply_dropout(a, act_idx):
            rate = drop.get(act_idx, 0.0)
            if rate > 0.0:
                a, mask = ops.dropout(a, rate, rng, "train")
                cache["drop_mask"][act_idx] = mask
            cache["act"][act_idx] = a
            return a

        # layer 1 (optionally three parallel dilated kernels)
        branch_outs = [conv_bn_relu(x, spec) for spec in self.plan.branches]
        a = branch_outs[0] if len(branch_outs) == 1 else np.concatenate(branch_outs, axis=1)
        cur = apply_dropout(a, 1)

        # encoder: pool then conv-bn-relu
        for spec in self.plan.encoder:
            pooled, argmax = ops.maxpool2(cur)
            cache["pool"][spec.layer] = (argmax, cur.shape)
            a = conv_bn_relu(pooled, spec)
            cur = apply_dropout(a, spec.layer)

        # decoder: upsample, optional skip concat, conv-relu
        skip_src = dict(self.plan.skips)
        for spec in self.plan.decoder:
            up = ops.upsample_nearest2(cur)
            if spec.layer in skip_src:
                cache["concat_first"][spec.layer] = up.shape[1]
                up = ops.concat_channels(up, cache["act"][skip_src[spec.layer]])
            a = conv_bn_relu(up, spec)
            cur = apply_dropout(a, spec.layer)

        # tail: 1x1 convs
        l8, l9 = self.plan.tail
        a8 = conv_bn_relu(cur, l8)
        cache["act"][8] = a8
        cache["conv_in"][l9.name] = a8
        z9 = ops.conv2d(a8, self._conv_params(l9))
        pred = ops.sigmoid(z9)
        cache["pred"] = pred
        return pred, cache

    def backward(self, cache: dict, grad_pred: np.ndarray) -> dict:
        """Gradients of the scalar whose d(pred) is `grad_pred`, for every parameter."""
        if not isinstance(cache, dict) or "pred" not in cache:
            raise ValueError("backward needs the cache returned by a forward call")
        if cache["mode"] != "train":
            raise ValueError("backward needs a cache from a train-mode forward")
        pred = cache["pred"]
        if grad_pred.shape != pred.shape:
            raise ShapeError(
                f"grad_pred shape {grad_pred.shape} does not match prediction {pred.shape}"
            )
        grads = {}
        skip_src = dict(self.plan.skips)
        acc = {}  # activation index -> accumulated skip cotangent

        def conv_bn_relu_backward(spec, g):
            g = ops.relu_backward(g, cache["relu_out"][spec.name])
            if spec.has_bn:
                g, dgamma, dbeta = ops.batchnorm_backward(cache["bn"][spec.name], g)
                grads[f"{spec.name}.gamma"] = dgamma
                grads[f"{spec.name}.beta"] = dbeta
            gin, gw, gb = ops.conv2d_backward(
                cache["conv_in"][spec.name], self._conv_params(spec), g
            )
            grads[f"{spec.name}.w"] = gw
            grads[f"{spec.name}.b"] = gb
            return gin

        def dropout_backward(g, act_idx):
            mask = cache["drop_mask"].get(act_idx)
            return g if mask is None else ops.dropout_backward(g, mask)

        # tail
        l8, l9 = self.plan.tail
        g = ops.sigmoid_backward(grad_pred, pred)
        g, gw9, gb9 = ops.conv2d_backward(cache["conv_in"][l9.name], self._conv_params(l9), g)
        grads[f"{l9.name}.w"], grads[f"{l9.name}.b"] = gw9, gb9
        g = conv_bn_relu_backward(l8, g)

        # decoder reversed: entering layer i, g is d(post-dropout activation i)
        for spec in reversed(self.plan.decoder):
            g = dropout_backward(g, spec.layer)
            g = conv_bn_relu_backward(spec, g)
            if spec.layer in skip_src:
                first = cache["concat_first"][spec.layer]
                g, g_skip = ops.split_channels(g, first)
                src = skip_src[spec.layer]
                acc[src] = g_skip if src not in acc else acc[src] + g_skip
            g = ops.upsample_nearest2_backward(g)

        # encoder reversed: entering layer i, g is d(post-dropout activation i)
        for spec in reversed(self.plan.encoder):
            g = dropout_backward(g, spec.layer)
            g = conv_bn_relu_backward(spec, g)
            argmax, prepool_shape = cache["pool"][spec.layer]
            g = ops.maxpool2_backward(g, argmax, prepool_shape)
            below = spec.layer - 1
            if below in acc:
                g = g + acc[below]

        # layer 1
        g = dropout_backward(g, 1)
        if len(self.plan.branches) == 1:
            conv_bn_relu_backward(self.plan.branches[0], g)
        else:
            c1 = self.plan.branches[0].out_channels
            start = 0
            for spec in self.plan.branches:
                conv_bn_relu_backward(spec, g[:, start : start + c1])
                start += c1
        return grads


def build_model(variant, config: GraphConfig | None = None, dtype=np.float32) -> ModelGraph:
    """Validate the (variant, config) pair and construct an uninitialized graph."""
    variant = parse_variant(variant)
    config = config or GraphConfig()
    bad = config.violations(variant)
    if bad:
        raise ConfigError(
            "invalid graph configuration:\n  - " + "\n  - ".join(bad)
        )
    return ModelGraph(variant, config, dtype=dtype)


def init_parameters(graph: ModelGraph, seed: int | None = None) -> ModelGraph:
    """Kaiming-normal weights (std sqrt(2 / (c_in * k^2))), zero biases,
    unit gamma, zero beta, zero running mean, unit running variance.

    Fully determined by the seed (config.seed when not given); draws happen
    in a fixed layer order in float64 before casting, so float32 and float64
    graphs from the same seed hold the same values.
    """
    if seed is None:
        seed = graph.config.seed
    rng = derive_rng(seed, 0)
    for spec in graph.plan.all_convs:
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=graph.params[f"{spec.name}.w"].shape)
        graph.params[f"{spec.name}.w"] = w.astype(graph.dtype)
        graph.params[f"{spec.name}.b"] = np.zeros(spec.out_channels, dtype=graph.dtype)
        if spec.has_bn:
            graph.params[f"{spec.name}.gamma"] = np.ones(spec.out_channels, dtype=graph.dtype)
            graph.params[f"{spec.name}.beta"] = np.zeros(spec.out_channels, dtype=graph.dtype)
            graph.stats[f"{spec.name}.running_mean"] = np.zeros(spec.out_channels, dtype=graph.dtype)
            graph.stats[f"{spec.name}.running_var"] = np.ones(spec.out_channels, dtype=graph.dtype)
    return graph


def replace_input_size(graph: ModelGraph, input_size) -> ModelGraph:
    """The same parameters on a graph rebuilt for another spatial size.

    Every layer is convolutional, so parameter shapes are independent of the
    input size; only the shape validation metadata changes.
    """
    config = replace(graph.config, input_size=tuple(int(s) for s in input_size))
    other = build_model(graph.variant, config, dtype=graph.dtype)
    other.params = dict(graph.params)
    other.stats = dict(graph.stats)
    return other


def closed_form_param_count(variant, config: GraphConfig | None = None) -> int:
    """Arithmetic parameter count from the plan alone (no tensors)."""
    variant = parse_variant(variant)
    config = config or GraphConfig()
    total = 0
    for spec in layer_plan(variant, config).all_convs:
        total += spec.out_channels * spec.in_channels * spec.kernel * spec.kernel
        total += spec.out_channels  # bias
        if spec.has_bn:
            total += 2 * spec.out_channels  # gamma, beta
    return total


def loss_fn(kind: str):
    try:
        return ops.LOSSES[kind]
    except KeyError:
        raise ConfigError(f"loss must be one of {sorted(ops.LOSSES)}, got {kind!r}") from None
