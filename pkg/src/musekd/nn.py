"""Layers, feature-tapped backbones and early-exit heads.

A :class:`Backbone` is a flat list of layers split into ``T`` consecutive
modules at ``module_boundaries``. :meth:`Backbone.forward_collect` returns the
feature at every module boundary together with the logits of the head
attached to it. Heads ``1..T-1`` are bottleneck heads; head ``T`` is the plain
classifier of the baseline network.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np

from . import tensor as F
from .tensor import Tensor

ARCHITECTURES = ("small-cnn-4", "resnet18-cifar")


class Module:
    """Minimal parameter container.

    Parameters are :class:`Tensor` attributes with ``requires_grad``; children
    are :class:`Module` attributes or lists of them. Non-trainable state
    (batchnorm running statistics) is kept in ``self._buffers``.
    """

    training = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._buffers.items():
            yield prefix + key, value
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(own) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(
                f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}"
            )
        for name, value in state.items():
            target = own[name].data if name in own else buffers[name]
            if target.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != expected {target.shape}")
            target[...] = value

    def macs(self, shape: tuple[int, ...]) -> tuple[tuple[int, ...], int]:
        """Output shape and multiply-accumulate count for an input shape."""
        return shape, 0

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)
    return Tensor(w, requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel=3, stride=1, padding=None, bias=False):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = _he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel)
        self.bias = Tensor(np.zeros(out_ch, np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def macs(self, shape):
        n, c, h, w = shape
        o, _, kh, kw = self.weight.shape
        oh = F._conv_out(h, kh, self.stride, self.padding)
        ow = F._conv_out(w, kw, self.stride, self.padding)
        return (n, o, oh, ow), o * c * kh * kw * oh * ow


class Linear(Module):
    def __init__(self, rng, in_features, out_features):
        super().__init__()
        self.weight = _he_normal(rng, (out_features, in_features), in_features)
        self.bias = Tensor(np.zeros(out_features, np.float32), requires_grad=True)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)

    def macs(self, shape):
        k, d = self.weight.shape
        return (shape[0], k), k * d


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self._buffers["running_mean"] = np.zeros(channels, np.float32)
        self._buffers["running_var"] = np.ones(channels, np.float32)

    def forward(self, x):
        return F.batch_norm2d(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ConvBNReLU(Module):
    def __init__(self, rng, in_ch, out_ch, kernel=3, stride=1):
        super().__init__()
        self.conv = Conv2d(rng, in_ch, out_ch, kernel, stride)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))

    def macs(self, shape):
        return self.conv.macs(shape)


class BasicBlock(Module):
    """Two 3x3 convs with an identity or 1x1 projection shortcut."""

    def __init__(self, rng, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, stride)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, 1)
        self.bn2 = BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = [Conv2d(rng, in_ch, out_ch, 1, stride, padding=0), BatchNorm2d(out_ch)]

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut[1](self.shortcut[0](x))
        return F.relu(out + skip)

    def macs(self, shape):
        mid, m1 = self.conv1.macs(shape)
        out, m2 = self.conv2.macs(mid)
        m3 = self.shortcut[0].macs(shape)[1] if self.shortcut else 0
        return out, m1 + m2 + m3


class Classifier(Module):
    """Global average pool followed by a linear layer."""

    def __init__(self, rng, channels, num_classes):
        super().__init__()
        self.fc = Linear(rng, channels, num_classes)

    def forward(self, x):
        return self.fc(F.global_avg_pool(x))

    def macs(self, shape):
        return self.fc.macs((shape[0], shape[1]))


class BottleneckHead(Module):
    """Early-exit head: strided 3x3 conv into a narrow bottleneck, 1x1 expansion
    to F_T's channel count, then pool + linear.

    ``project`` maps F_t into F_T's shape and is reused by the L2 comparator.
    """

    def __init__(self, rng, in_ch, out_ch, stride, num_classes):
        super().__init__()
        width = max(out_ch // 4, 1)
        self.reduce = ConvBNReLU(rng, in_ch, width, 3, stride)
        self.expand = ConvBNReLU(rng, width, out_ch, 1, 1)
        self.classifier = Classifier(rng, out_ch, num_classes)

    def project(self, x):
        return self.expand(self.reduce(x))

    def forward(self, x):
        return self.classifier(self.project(x))

    def macs(self, shape):
        mid, m1 = self.reduce.macs(shape)
        mid, m2 = self.expand.macs(mid)
        out, m3 = self.classifier.macs(mid)
        return out, m1 + m2 + m3


def _head_stride(size: int, target: int) -> int:
    # smallest stride of a 3x3/pad-1 conv whose output is no larger than target
    stride = 1
    while F._conv_out(size, 3, stride, 1) > target:
        stride += 1
    return stride


@dataclass
class BackboneSpec:
    architecture: str = "small-cnn-4"
    num_classes: int = 10
    module_boundaries: list[int] | None = None
    in_channels: int = 3
    input_size: int = 32

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(
                f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        depth = _depth(self.architecture)
        if self.module_boundaries is None:
            self.module_boundaries = list(_default_boundaries(self.architecture))
        b = list(self.module_boundaries)
        if len(b) < 1:
            raise ValueError("need at least one module boundary (T >= 2)")
        if any(x >= y for x, y in zip(b, b[1:])) or b[0] < 1 or b[-1] >= depth:
            raise ValueError(
                f"module_boundaries {b} must be strictly increasing within 1..{depth - 1}"
            )
        self.module_boundaries = b

    @property
    def num_modules(self) -> int:
        return len(self.module_boundaries) + 1

    def to_dict(self) -> dict:
        return asdict(self)


def _depth(arch: str) -> int:
    return 4 if arch == "small-cnn-4" else 9


def _default_boundaries(arch: str) -> tuple[int, ...]:
    # small-cnn-4: one block per module; resnet18: stem+stage1 | stage2 | stage3 | stage4
    return (1, 2, 3) if arch == "small-cnn-4" else (3, 5, 7)


def _build_layers(spec: BackboneSpec, rng) -> list[Module]:
    if spec.architecture == "small-cnn-4":
        widths = (32, 64, 128, 256)
        layers, prev = [], spec.in_channels
        for i, w in enumerate(widths):
            layers.append(ConvBNReLU(rng, prev, w, 3, stride=1 if i == 0 else 2))
            prev = w
        return layers
    layers = [ConvBNReLU(rng, spec.in_channels, 64, 3, 1)]
    prev = 64
    for width, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
        layers.append(BasicBlock(rng, prev, width, stride))
        layers.append(BasicBlock(rng, width, width, 1))
        prev = width
    return layers


@dataclass
class FeatureSet:
    features: list[Tensor]
    logits: list[Tensor]

    def __post_init__(self):
        if len(self.features) != len(self.logits):
            raise ValueError("features and logits must have the same length")
        sizes = {t.shape[0] for t in self.features} | {t.shape[0] for t in self.logits}
        if len(sizes) != 1:
            raise ValueError(f"inconsistent batch sizes across the feature set: {sizes}")

    @property
    def num_modules(self) -> int:
        return len(self.features)


class Backbone(Module):
    def __init__(self, spec: BackboneSpec, seed: int):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.layers = _build_layers(spec, rng)
        bounds = [0, *spec.module_boundaries, len(self.layers)]
        self.stages = [self.layers[a:b] for a, b in zip(bounds, bounds[1:])]

        shape = (1, spec.in_channels, spec.input_size, spec.input_size)
        self.feature_shapes = []
        for stage in self.stages:
            for layer in stage:
                shape, _ = layer.macs(shape)
            self.feature_shapes.append(shape[1:])
        c_last, h_last, _ = self.feature_shapes[-1]
        heads = []
        for c, h, _ in self.feature_shapes[:-1]:
            heads.append(BottleneckHead(rng, c, c_last, _head_stride(h, h_last), spec.num_classes))
        heads.append(Classifier(rng, c_last, spec.num_classes))
        self.heads = heads

    @property
    def num_modules(self) -> int:
        return len(self.stages)

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected input [N, {self.spec.in_channels}, H, W], got {tuple(x.shape)}"
            )

    def forward_collect(self, x: Tensor, train_mode: bool | None = None) -> FeatureSet:
        if train_mode is not None:
            self.train(train_mode)
        self._check_input(x)
        features, logits = [], []
        h = x
        for stage, head in zip(self.stages, self.heads):
            for layer in stage:
                h = layer(h)
            features.append(h)
            logits.append(head(h))
        return FeatureSet(features, logits)

    def forward(self, x: Tensor) -> Tensor:
        """Baseline network output: head T applied to F_T."""
        self._check_input(x)
        for layer in self.layers:
            x = layer(x)
        return self.heads[-1](x)

    def backbone_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def head_parameters(self) -> list[Tensor]:
        return [p for head in self.heads for p in head.parameters()]

    def truncate(self, k: int) -> "CompactModel":
        _check_module_index(k, self.num_modules)
        return CompactModel(self, k)


def _check_module_index(k: int, num_modules: int) -> None:
    if not 1 <= k <= num_modules:
        raise ValueError(f"module index must be in 1..{num_modules}, got {k}")


class CompactModel(Module):
    """Backbone prefix through module k plus head k. Shares weights with its source."""

    def __init__(self, backbone: Backbone, k: int):
        super().__init__()
        self.k = k
        # flat list so train()/eval() and parameter walks reach every layer
        self.layers = [layer for stage in backbone.stages[:k] for layer in stage]
        self.head = backbone.heads[k - 1]
        self.spec = backbone.spec

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.head(x)


def build_backbone(spec: BackboneSpec, seed: int) -> Backbone:
    return Backbone(spec, seed)


def bottleneck_head(backbone: Backbone, t: int, feature: Tensor) -> Tensor:
    """Logits of early-exit head t (1-based) for feature F_t."""
    if not 1 <= t < backbone.num_modules:
        raise ValueError(f"bottleneck heads exist for t in 1..{backbone.num_modules - 1}")
    return backbone.heads[t - 1](feature)


def module_counts(backbone: Backbone) -> list[dict]:
    """Per-module parameters and MACs for the stage body and its head (batch size 1)."""
    shape = (1, backbone.spec.in_channels, backbone.spec.input_size, backbone.spec.input_size)
    rows = []
    for stage, head in zip(backbone.stages, backbone.heads):
        stage_macs = 0
        for layer in stage:
            shape, m = layer.macs(shape)
            stage_macs += m
        rows.append(
            {
                "stage_params": sum(layer.num_parameters() for layer in stage),
                "stage_macs": stage_macs,
                "head_params": head.num_parameters(),
                "head_macs": head.macs(shape)[1],
            }
        )
    return rows


def count_params(backbone: Backbone, up_to_module: int | None = None) -> int:
    """Parameters of the baseline network, or of the early exit at ``up_to_module``."""
    rows = module_counts(backbone)
    k = len(rows) if up_to_module is None else up_to_module
    _check_module_index(k, len(rows))
    return sum(r["stage_params"] for r in rows[:k]) + rows[k - 1]["head_params"]


def count_macs(backbone: Backbone, up_to_module: int | None = None) -> int:
    rows = module_counts(backbone)
    k = len(rows) if up_to_module is None else up_to_module
    _check_module_index(k, len(rows))
    return sum(r["stage_macs"] for r in rows[:k]) + rows[k - 1]["head_macs"]


def count_flops(backbone: Backbone, input_shape=None, up_to_module: int | None = None) -> int:
    """FLOPs per image, counting one multiply-accumulate as two FLOPs.

    Batchnorm, activations and pooling are not counted. ``input_shape`` is
    ``(C, H, W)`` and defaults to the backbone's configured input size.
    """
    if input_shape is not None:
        c, h, w = input_shape
        if c != backbone.spec.in_channels or h != w:
            raise ValueError(f"input shape {input_shape} incompatible with backbone")
        if h != backbone.spec.input_size:
            spec = BackboneSpec(**{**backbone.spec.to_dict(), "input_size": h})
            backbone = Backbone(spec, seed=0)
    return 2 * count_macs(backbone, up_to_module)
