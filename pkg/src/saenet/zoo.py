"""Declarative architectures: the ResNet-50 family, SE/SaE variants and small CIFAR presets."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autograd as ag
from .errors import ConfigurationError
from .nn import (BLOCK_MODES, BatchNorm2d, Bottleneck, Conv2d, GlobalAvgPool, Linear, MaxPool2d,
                 Module, SaEConfig, SaEGate, SEGate, Sequential, initialize)
from .pgm import write_pgm


@dataclass(frozen=True)
class StemSpec:
    out_channels: int = 64
    kernel: int = 7
    stride: int = 2
    padding: int = 3
    max_pool: bool = True


@dataclass(frozen=True)
class StageSpec:
    mode: str
    in_channels: int
    mid_channels: int
    out_channels: int
    repeats: int
    stride: int = 1
    groups: int = 1
    sae: Optional[SaEConfig] = None


@dataclass(frozen=True)
class ArchSpec:
    name: str
    stem: StemSpec
    stages: tuple
    num_classes: int = 1000
    in_channels: int = 3
    input_size: int = 224

    def validate(self) -> None:
        prev = self.stem.out_channels
        for i, st in enumerate(self.stages, start=1):
            if st.mode not in BLOCK_MODES:
                raise ConfigurationError(f"stage{i}: unknown block mode {st.mode!r}")
            if st.in_channels != prev:
                raise ConfigurationError(
                    f"stage{i}: in_channels={st.in_channels} does not match previous width {prev}"
                )
            if st.repeats < 1:
                raise ConfigurationError(f"stage{i}: repeats must be >= 1")
            prev = st.out_channels
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")

    @property
    def feature_width(self) -> int:
        return self.stages[-1].out_channels if self.stages else self.stem.out_channels


class Stem(Module):
    def __init__(self, in_channels: int, spec: StemSpec):
        super().__init__()
        self.conv = Conv2d(in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding)
        self.bn = BatchNorm2d(spec.out_channels)
        self.pool = MaxPool2d(3, 2, 1) if spec.max_pool else None

    def forward(self, x):
        x = ag.relu(self.bn(self.conv(x)))
        return self.pool(x) if self.pool is not None else x


class Model(Module):
    """Stem, residual stages, global average pool and a linear classifier producing logits.

    Softmax is folded into the loss and into evaluation, so ``forward``
    returns raw logits.
    """

    def __init__(self, spec: ArchSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.stem = Stem(spec.in_channels, spec.stem)
        self.stages = []
        for i, st in enumerate(spec.stages, start=1):
            blocks = []
            for j in range(st.repeats):
                blocks.append(Bottleneck(
                    st.in_channels if j == 0 else st.out_channels,
                    st.mid_channels, st.out_channels,
                    stride=st.stride if j == 0 else 1,
                    mode=st.mode, groups=st.groups, sae=st.sae or SaEConfig(),
                ))
            stage = Sequential(blocks, prefix="block")
            setattr(self, f"stage{i}", stage)
            self.stages.append(stage)
        self.pool = GlobalAvgPool()
        self.fc = Linear(spec.feature_width, spec.num_classes)

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return self.fc(self.pool(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            return self(ag.Node(np.asarray(x, dtype=self.dtype))).value

    def stage_shapes(self, batch: int = 1, size: Optional[int] = None) -> list[tuple]:
        size = size or self.spec.input_size
        shape = self.stem.output_shape((batch, self.spec.in_channels, size, size))
        shapes = []
        for stage in self.stages:
            shape = stage.output_shape(shape)
            shapes.append(shape)
        return shapes


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------

IMAGENET_REPEATS = (3, 4, 6, 3)
IMAGENET_OUT = (256, 512, 1024, 2048)
IMAGENET_MID = (64, 128, 256, 512)
IMAGENET_MID_X = (128, 256, 512, 1024)
CARDINALITY_GROUPS = 32

_FAMILIES = {
    # name: (block mode, 3x3 groups, ResNeXt widths)
    "resnet50": ("plain", 1, False),
    "resnext50": ("aggregated", CARDINALITY_GROUPS, True),
    "se-resnet50": ("se", 1, False),
    "sae-resnet50": ("sae", 1, False),
    "sae-resnext50": ("sae", CARDINALITY_GROUPS, True),
}

_ALIASES = {
    "resnet-cifar": "resnet50-cifar",
    "resnext-cifar": "resnext50-cifar",
    "se-resnet-cifar": "se-resnet50-cifar",
    "sae-resnet-cifar": "sae-resnet50-cifar",
    "sae-resnext-cifar": "sae-resnext50-cifar",
}

BLOCK_TARGETS = ("block-plain", "block-aggregated", "block-se", "block-sae", "gate-se", "gate-sae")

MODEL_PRESETS = tuple(_FAMILIES) + tuple(f"{n}-cifar" for n in _FAMILIES) + tuple(_ALIASES) + ("sae-tiny",)


def _stages(mode, groups, mids, outs, repeats, stem_out, sae):
    stages, prev = [], stem_out
    for i, (mid, out, rep) in enumerate(zip(mids, outs, repeats)):
        stages.append(StageSpec(mode, prev, mid, out, rep, stride=1 if i == 0 else 2, groups=groups,
                                sae=sae if mode in ("se", "sae") else None))
        prev = out
    return tuple(stages)


def preset(name: str, sae: SaEConfig = SaEConfig(), num_classes: Optional[int] = None) -> ArchSpec:
    """Return the ArchSpec registered under ``name`` (see ``MODEL_PRESETS``)."""
    name = _ALIASES.get(name, name)
    if name == "sae-tiny":
        spec = ArchSpec(
            "sae-tiny", StemSpec(32, 3, 1, 1, max_pool=False),
            (StageSpec("sae", 32, 8, 64, 1, 1, 1, sae), StageSpec("sae", 64, 16, 128, 1, 2, 1, sae)),
            num_classes=8, input_size=16,
        )
    else:
        base, cifar = (name[:-6], True) if name.endswith("-cifar") else (name, False)
        if base not in _FAMILIES:
            raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(MODEL_PRESETS)}")
        mode, groups, wide = _FAMILIES[base]
        mids = IMAGENET_MID_X if wide else IMAGENET_MID
        if cifar:
            # Desk-scale variant: quartered widths, two blocks per stage, 3x3 stem without pooling.
            stem = StemSpec(16, 3, 1, 1, max_pool=False)
            spec = ArchSpec(name, stem, _stages(mode, groups, [m // 4 for m in mids],
                                                [o // 4 for o in IMAGENET_OUT], (2, 2, 2, 2), 16, sae),
                            num_classes=100, input_size=32)
        else:
            spec = ArchSpec(name, StemSpec(), _stages(mode, groups, mids, IMAGENET_OUT, IMAGENET_REPEATS, 64, sae),
                            num_classes=1000, input_size=224)
    if num_classes is not None:
        spec = replace(spec, num_classes=num_classes)
    spec.validate()
    return spec


def build(spec: ArchSpec, seed: int = 0) -> Model:
    """Instantiate ``spec`` with weights drawn deterministically from ``seed``."""
    return initialize(Model(spec), seed).name_parameters()


def block_target(name: str, sae: SaEConfig = SaEConfig(), seed: int = 0):
    """Small modules used by ``gradcheck``: returns ``(module, input_shape)``."""
    if name == "gate-sae":
        module, shape = SaEGate(64, sae), (1, 64, 4, 4)
    elif name == "gate-se":
        module, shape = SEGate(64, sae.reduction), (1, 64, 4, 4)
    elif name in ("block-plain", "block-aggregated", "block-se", "block-sae"):
        mode = name.split("-", 1)[1]
        mid = 64 if mode == "aggregated" else 16
        module, shape = Bottleneck(64, mid, 64, mode=mode, sae=sae), (2, 64, 4, 4)
    else:
        raise ConfigurationError(f"unknown gradcheck target {name!r}; choose from {', '.join(BLOCK_TARGETS)}")
    return initialize(module, seed).name_parameters(), shape


# --------------------------------------------------------------------------
# accounting and export
# --------------------------------------------------------------------------

@dataclass
class ModelSummary:
    rows: list = field(default_factory=list)  # (layer name, output shape, parameter count)

    @property
    def total(self) -> int:
        return sum(r[2] for r in self.rows)

    def to_csv(self) -> str:
        lines = ["layer,out_shape,params"]
        for name, shape, n in self.rows:
            lines.append(f"{name},{'x'.join(str(d) for d in shape)},{n}")
        lines.append(f"total,,{self.total}")
        return "\n".join(lines) + "\n"


def param_count(model: Module, input_shape: Optional[tuple] = None) -> ModelSummary:
    """Per-layer output shapes and exact parameter counts."""
    if input_shape is None:
        spec = getattr(model, "spec", None)
        input_shape = (1, spec.in_channels, spec.input_size, spec.input_size) if spec else (1, 3, 32, 32)
    rows, _ = model.describe(tuple(input_shape), "")
    return ModelSummary(rows)


def _normalize_kernel(k: np.ndarray) -> np.ndarray:
    lo, hi = float(k.min()), float(k.max())
    if hi - lo <= 0 or not math.isfinite(hi - lo):
        return np.full(k.shape, 128, dtype=np.uint8)
    return np.rint((k - lo) / (hi - lo) * 255.0).astype(np.uint8)


def stem_filter_images(model: Model) -> list[np.ndarray]:
    """One uint8 image per stem output channel: the input-channel mean, min-max scaled."""
    w = np.asarray(model.stem.conv.weight.value, dtype=np.float64)
    return [_normalize_kernel(w[o].mean(axis=0)) for o in range(w.shape[0])]


def montage(images: list[np.ndarray], gap: int = 1) -> np.ndarray:
    """Tile equal-sized images row-major on a near-square grid with ``gap`` black pixels between tiles."""
    n = len(images)
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    h, w = images[0].shape
    out = np.zeros((rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap), dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        out[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = img
    return out


def export_first_conv_filters(model: Model, path) -> list[str]:
    """Write ``stem_filter_XXX.pgm`` per stem channel plus ``stem_montage.pgm`` into ``path``."""
    os.makedirs(path, exist_ok=True)
    images = stem_filter_images(model)
    written = []
    for i, img in enumerate(images):
        fn = os.path.join(path, f"stem_filter_{i:03}.pgm")
        write_pgm(fn, img)
        written.append(fn)
    fn = os.path.join(path, "stem_montage.pgm")
    write_pgm(fn, montage(images))
    written.append(fn)
    return written
