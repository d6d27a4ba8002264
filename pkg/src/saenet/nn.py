"""Layers, channel gates and the four bottleneck block variants.

Modules take and return :class:`~saenet.autograd.Node` objects.  Layer
constructors only allocate (zero weights, unit BN scale); call
:func:`initialize` to draw weights from a seed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Node, Parameter, cross_entropy  # noqa: F401  (re-exported)
from .errors import ConfigurationError
from .tensor import ConvSpec

MERGE_MODES = ("concat", "sum")
GATE_PLACEMENTS = ("on_branch_output", "on_branch_input")
BLOCK_MODES = ("plain", "aggregated", "se", "sae")


class Module:
    """Minimal container that tracks child modules, parameters and buffers by attribute name."""

    training = True
    is_layer = False

    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Parameter):
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, x: Node) -> Node:
        return self.forward(x)

    def forward(self, x: Node) -> Node:
        raise NotImplementedError

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), b

    def set_buffer(self, path: str, value: np.ndarray) -> None:
        *mods, leaf = path.split(".")
        mod = self
        for m in mods:
            mod = mod._modules[m]
        mod._buffers[leaf][...] = value

    def name_parameters(self) -> "Module":
        """Stamp every Parameter with its dotted path (``stage2.block0.sae.branch3.weight``)."""
        for name, p in self.named_parameters():
            p.name = name
        return self

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            if p.value.dtype != dtype:
                p.astype(dtype)
        for _, m in self.named_modules():
            for name, b in list(m._buffers.items()):
                if b.dtype != dtype:
                    m.register_buffer(name, b.astype(dtype))
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @property
    def dtype(self):
        ps = self.parameters()
        return ps[0].value.dtype if ps else np.dtype(np.float32)

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def own_params(self) -> int:
        return sum(p.size for p in self._params.values())

    def describe(self, in_shape: tuple, prefix: str):
        """Shape-propagate ``in_shape``; return ``(rows, out_shape)`` with one row per leaf layer."""
        if not self._modules:
            out = self.output_shape(in_shape)
            return ([(prefix, out, self.own_params())] if self.is_layer else []), out
        rows, shape = [], in_shape
        for name, child in self._modules.items():
            r, shape = child.describe(shape, f"{prefix}.{name}" if prefix else name)
            rows.extend(r)
        return rows, shape

    def output_shape(self, in_shape: tuple) -> tuple:
        if not self._modules:
            return tuple(in_shape)
        return self.describe(in_shape, "")[1]


class Sequential(Module):
    def __init__(self, layers: Sequence[Module] = (), prefix: str = "layer"):
        super().__init__()
        self.layers = []
        for i, layer in enumerate(layers):
            setattr(self, f"{prefix}{i}", layer)
            self.layers.append(layer)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


# --------------------------------------------------------------------------
# leaf layers
# --------------------------------------------------------------------------

class Conv2d(Module):
    is_layer = True

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=0, groups=1, bias=False):
        super().__init__()
        k = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        self.spec = ConvSpec(in_channels, out_channels, k, stride, padding, groups)
        self.weight = Parameter(np.zeros(self.spec.weight_shape, dtype=np.float32))
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32)) if bias else None

    def forward(self, x):
        b = None if self.bias is None else self.bias.node()
        return ag.conv2d(x, self.weight.node(), b, self.spec)

    def output_shape(self, in_shape):
        return (in_shape[0], self.spec.out_channels, *self.spec.output_hw(*in_shape[2:]))


class BatchNorm2d(Module):
    is_layer = True

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x):
        return ag.batchnorm2d(x, self.gamma.node(), self.beta.node(), self.running_mean,
                              self.running_var, self.training, self.eps, self.momentum)

    def output_shape(self, in_shape):
        return tuple(in_shape)


class Linear(Module):
    """Fully connected layer; weight is stored (in_features, out_features)."""

    is_layer = True

    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.weight = Parameter(np.zeros((in_features, out_features), dtype=np.float32))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32)) if bias else None

    def forward(self, x):
        return ag.linear(x, self.weight.node(), None if self.bias is None else self.bias.node())

    def output_shape(self, in_shape):
        return (in_shape[0], self.weight.shape[1])


class ReLU(Module):
    is_layer = True

    def forward(self, x):
        return ag.relu(x)

    def output_shape(self, in_shape):
        return tuple(in_shape)


class MaxPool2d(Module):
    is_layer = True

    def __init__(self, kernel=3, stride=2, padding=1):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        return ag.max_pool2d(x, self.kernel, self.stride, self.padding)

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        f = lambda s: (s + 2 * self.padding - self.kernel) // self.stride + 1  # noqa: E731
        return (n, c, f(h), f(w))


class GlobalAvgPool(Module):
    is_layer = True

    def forward(self, x):
        return ag.global_avg_pool(x)

    def output_shape(self, in_shape):
        return tuple(in_shape[:2])


def initialize(module: Module, seed: int = 0) -> Module:
    """Kaiming fan-in normal for conv/FC weights, zero biases, BN gamma=1 beta=0.

    Draws happen in ``named_modules`` order, so a given seed always yields
    the same weights for the same architecture.
    """
    rng = np.random.default_rng(seed)
    for _, m in module.named_modules():
        if isinstance(m, Conv2d):
            fan_in = int(np.prod(m.weight.shape[1:]))
            m.weight.value[...] = rng.standard_normal(m.weight.shape) * np.sqrt(2.0 / fan_in)
            if m.bias is not None:
                m.bias.value[...] = 0
        elif isinstance(m, Linear):
            fan_in = m.weight.shape[0]
            m.weight.value[...] = rng.standard_normal(m.weight.shape) * np.sqrt(2.0 / fan_in)
            if m.bias is not None:
                m.bias.value[...] = 0
        elif isinstance(m, BatchNorm2d):
            m.gamma.value[...] = 1
            m.beta.value[...] = 0
            m.running_mean[...] = 0
            m.running_var[...] = 1
    return module


# --------------------------------------------------------------------------
# channel gates
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SaEConfig:
    """Squeeze-aggregated-excitation gate settings; defaults are r=32 with four branches."""

    reduction: int = 32
    cardinality: int = 4
    merge: str = "concat"
    gate_placement: str = "on_branch_output"

    def __post_init__(self):
        if self.reduction < 1 or self.cardinality < 1:
            raise ConfigurationError(f"reduction and cardinality must be >= 1, got {self}")
        if self.merge not in MERGE_MODES:
            raise ConfigurationError(f"merge must be one of {MERGE_MODES}, got {self.merge!r}")
        if self.gate_placement not in GATE_PLACEMENTS:
            raise ConfigurationError(f"gate_placement must be one of {GATE_PLACEMENTS}, got {self.gate_placement!r}")

    def bottleneck(self, channels: int) -> int:
        if channels % self.reduction:
            raise ConfigurationError(f"gate width {channels} is not divisible by reduction {self.reduction}")
        return channels // self.reduction

    def merged_width(self, channels: int) -> int:
        b = self.bottleneck(channels)
        return b * self.cardinality if self.merge == "concat" else b


@dataclass
class GateWeights:
    """Raw weights of an SaE gate: ``card`` squeeze branches and one excitation FC."""

    branch_weights: list
    branch_biases: Optional[list]
    excite_weight: object
    excite_bias: object

    def validate(self, channels: int, cfg: SaEConfig) -> None:
        b = cfg.bottleneck(channels)
        shapes = {np.shape(_val(w)) for w in self.branch_weights}
        if len(self.branch_weights) != cfg.cardinality or shapes != {(channels, b)}:
            raise ConfigurationError(
                f"expected {cfg.cardinality} branch weights of shape {(channels, b)}, got {sorted(shapes)}"
            )
        m = cfg.merged_width(channels)
        if np.shape(_val(self.excite_weight)) != (m, channels):
            raise ConfigurationError(
                f"excite weight must be {(m, channels)} for merge={cfg.merge}, "
                f"got {np.shape(_val(self.excite_weight))}"
            )


def _val(x):
    return x.value if isinstance(x, Node) else x


def se_gate(u: Node, squeeze_w, squeeze_b, excite_w, excite_b, reduction: int = 32) -> Node:
    """sigmoid(FC2(relu(FC1(global_avg_pool(u))))) with FC1: C -> C/r and FC2: C/r -> C."""
    c = u.value.shape[1]
    if c % reduction:
        raise ConfigurationError(f"SE gate width {c} is not divisible by reduction {reduction}")
    z = ag.global_avg_pool(u)
    s = ag.relu(ag.linear(z, ag.constant(squeeze_w), ag.constant(squeeze_b)))
    return ag.sigmoid(ag.linear(s, ag.constant(excite_w), ag.constant(excite_b)))


def sae_gate(u: Node, weights: GateWeights, cfg: SaEConfig) -> Node:
    """Squeeze into ``card`` relu branches of width C/r, merge, excite back to C, sigmoid."""
    weights.validate(u.value.shape[1], cfg)
    z = ag.global_avg_pool(u)
    biases = weights.branch_biases or [None] * cfg.cardinality
    branches = [
        ag.relu(ag.linear(z, ag.constant(w), None if b is None else ag.constant(b)))
        for w, b in zip(weights.branch_weights, biases)
    ]
    if cfg.merge == "concat":
        merged = ag.concat_channels(branches)
    else:
        merged = branches[0]
        for b in branches[1:]:
            merged = ag.add(merged, b)
    return ag.sigmoid(ag.linear(merged, ag.constant(weights.excite_weight), ag.constant(weights.excite_bias)))


class SEGate(Module):
    def __init__(self, channels: int, reduction: int = 32):
        super().__init__()
        if channels % reduction:
            raise ConfigurationError(f"SE gate width {channels} is not divisible by reduction {reduction}")
        self.channels, self.reduction = channels, reduction
        self.squeeze = Linear(channels, channels // reduction)
        self.excite = Linear(channels // reduction, channels)

    def forward(self, u):
        return se_gate(u, self.squeeze.weight.node(), self.squeeze.bias.node(),
                       self.excite.weight.node(), self.excite.bias.node(), self.reduction)

    def describe(self, in_shape, prefix):
        n = in_shape[0]
        b = self.channels // self.reduction
        rows = [(f"{prefix}.squeeze", (n, b), self.squeeze.own_params()),
                (f"{prefix}.excite", (n, self.channels), self.excite.own_params())]
        return rows, (n, self.channels)


class SaEGate(Module):
    def __init__(self, channels: int, cfg: SaEConfig = SaEConfig()):
        super().__init__()
        self.channels, self.cfg = channels, cfg
        b = cfg.bottleneck(channels)
        self.branches = []
        for i in range(cfg.cardinality):
            fc = Linear(channels, b)
            setattr(self, f"branch{i}", fc)
            self.branches.append(fc)
        self.excite = Linear(cfg.merged_width(channels), channels)

    def gate_weights(self) -> GateWeights:
        return GateWeights([fc.weight.node() for fc in self.branches],
                           [fc.bias.node() for fc in self.branches],
                           self.excite.weight.node(), self.excite.bias.node())

    def forward(self, u):
        return sae_gate(u, self.gate_weights(), self.cfg)

    def describe(self, in_shape, prefix):
        n = in_shape[0]
        b = self.cfg.bottleneck(self.channels)
        rows = [(f"{prefix}.branch{i}", (n, b), fc.own_params()) for i, fc in enumerate(self.branches)]
        rows.append((f"{prefix}.excite", (n, self.channels), self.excite.own_params()))
        return rows, (n, self.channels)


def se_gate_params(channels: int, reduction: int) -> int:
    b = channels // reduction
    return channels * b + b + b * channels + channels


def sae_gate_params(channels: int, cfg: SaEConfig) -> int:
    b = cfg.bottleneck(channels)
    m = cfg.merged_width(channels)
    return cfg.cardinality * (channels * b + b) + m * channels + channels


# --------------------------------------------------------------------------
# bottleneck residual block
# --------------------------------------------------------------------------

class Bottleneck(Module):
    """1x1 reduce -> 3x3 (grouped) -> 1x1 expand, each with batch norm, plus skip.

    ``mode`` picks the variant: ``plain`` (x + F(x)), ``aggregated`` (3x3 conv
    split into ``groups`` branches, 32 by default), ``se`` and ``sae`` (a
    channel gate recalibrates the branch).  With the default gate placement
    the gate is computed from and applied to the branch output before the
    skip addition; ``on_branch_input`` gates the block input fed to F
    instead.  The skip path becomes a 1x1 conv + BN projection whenever the
    stride or channel count changes, unless ``projection=False``.
    """

    def __init__(self, in_channels, mid_channels, out_channels, stride=1, mode="plain",
                 groups=None, sae: SaEConfig = SaEConfig(), projection=None):
        super().__init__()
        if mode not in BLOCK_MODES:
            raise ConfigurationError(f"block mode must be one of {BLOCK_MODES}, got {mode!r}")
        if groups is None:
            groups = 32 if mode == "aggregated" else 1
        self.mode, self.cfg = mode, sae
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        self.conv1 = Conv2d(in_channels, mid_channels, 1)
        self.bn1 = BatchNorm2d(mid_channels)
        self.conv2 = Conv2d(mid_channels, mid_channels, 3, stride=stride, padding=1, groups=groups)
        self.bn2 = BatchNorm2d(mid_channels)
        self.conv3 = Conv2d(mid_channels, out_channels, 1)
        self.bn3 = BatchNorm2d(out_channels)
        self.gate_on_input = sae.gate_placement == "on_branch_input"
        gate_width = in_channels if self.gate_on_input else out_channels
        gate = None
        if mode == "se":
            gate = self.se = SEGate(gate_width, sae.reduction)
        elif mode == "sae":
            gate = self.sae = SaEGate(gate_width, sae)
        object.__setattr__(self, "gate", gate)  # alias only; registered under its mode name
        if projection is None:
            projection = stride != 1 or in_channels != out_channels
        self.projection = bool(projection)
        if self.projection:
            self.downsample_conv = Conv2d(in_channels, out_channels, 1, stride=stride)
            self.downsample_bn = BatchNorm2d(out_channels)

    def branch(self, x):
        out = ag.relu(self.bn1(self.conv1(x)))
        out = ag.relu(self.bn2(self.conv2(out)))
        return self.bn3(self.conv3(out))

    def forward(self, x):
        inner = x
        if self.gate is not None and self.gate_on_input:
            inner = ag.channel_scale(x, self.gate(x))
        out = self.branch(inner)
        if self.gate is not None and not self.gate_on_input:
            out = ag.channel_scale(out, self.gate(out))
        skip = self.downsample_bn(self.downsample_conv(x)) if self.projection else x
        return ag.relu(ag.add(out, skip))

    def describe(self, in_shape, prefix):
        rows = []
        gate_rows = []
        if self.gate is not None and self.gate_on_input:
            gate_rows, _ = self.gate.describe(in_shape, f"{prefix}.{self.mode}")
            rows.extend(gate_rows)
        shape = in_shape
        for name in ("conv1", "bn1", "conv2", "bn2", "conv3", "bn3"):
            r, shape = getattr(self, name).describe(shape, f"{prefix}.{name}")
            rows.extend(r)
        if self.gate is not None and not self.gate_on_input:
            gate_rows, _ = self.gate.describe(shape, f"{prefix}.{self.mode}")
            rows.extend(gate_rows)
        if self.projection:
            s = in_shape
            for name in ("downsample_conv", "downsample_bn"):
                r, s = getattr(self, name).describe(s, f"{prefix}.{name}")
                rows.extend(r)
        return rows, shape
