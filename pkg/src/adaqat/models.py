"""Quantization-aware layers and the three desk-scale architectures.

Every forward pass takes a :class:`Precision` describing the bits of the
searchable layers. Layers flagged ``pinned`` (the first and last weight layer
and the activation feeding the last layer) ignore it and use the model's
``pinned_bits`` instead. Passing ``precision=None`` bypasses every quantizer
(raw weights, plain ReLU); that path is the unquantized reference network.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Literal, Optional, Sequence

import numpy as np

from . import tensor as T
from .cost import LayerCostSpec, NetworkCostSpec
from .quantizers import ALPHA_INIT, FULL_PRECISION, PactActivation, quantize_weights
from .tensor import DTYPE, Tensor

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mlp", "cnn-small", "resnet-thin")


class ConfigError(ValueError):
    """Invalid experiment or model configuration."""


@dataclass(frozen=True)
class Precision:
    """Bits used by searchable layers plus the pinned-layer precision."""

    k_w: int
    k_a: int
    pinned: int = 8

    def weight_bits(self, pinned: bool) -> int:
        return self.pinned if pinned else self.k_w

    def act_bits(self, pinned: bool) -> int:
        return self.pinned if pinned else self.k_a


@dataclass
class Context:
    precision: Optional[Precision]
    training: bool = True
    update_stats: bool = True


def kaiming_normal(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(DTYPE)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def cost_specs(self, shape: tuple[int, ...]) -> tuple[list[LayerCostSpec], tuple[int, ...]]:
        return [], shape


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, pinned: bool = False, name: str = "fc"):
        self.weight = Tensor(kaiming_normal((n_out, n_in), n_in, rng), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(n_out, DTYPE), requires_grad=True, name=f"{name}.bias")
        self.pinned = pinned
        self.name = name

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        w = self.weight
        if ctx.precision is not None:
            w = quantize_weights(w, ctx.precision.weight_bits(self.pinned))
        return T.linear(T.flatten(x) if x.data.ndim > 2 else x, w, self.bias)

    def named_parameters(self, prefix=""):
        yield f"{prefix}{self.name}.weight", self.weight
        yield f"{prefix}{self.name}.bias", self.bias

    def cost_specs(self, shape):
        n = self.weight.size
        spec = LayerCostSpec("dense", n, param_count=n, pinned_bits=None, name=self.name)
        return [spec], (self.weight.shape[0],)


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, pinned: bool = False, name: str = "conv"):
        fan_in = c_in * k * k
        self.weight = Tensor(kaiming_normal((c_out, c_in, k, k), fan_in, rng), requires_grad=True,
                             name=f"{name}.weight")
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.pinned = pinned
        self.name = name

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        w = self.weight
        if ctx.precision is not None:
            w = quantize_weights(w, ctx.precision.weight_bits(self.pinned))
        return T.conv2d(x, w, self.stride, self.padding)

    def named_parameters(self, prefix=""):
        yield f"{prefix}{self.name}.weight", self.weight

    def cost_specs(self, shape):
        o, c, kh, kw = self.weight.shape
        spec = LayerCostSpec("conv", o * c, w_f=kw, h_f=kh, s_f=self.stride, param_count=self.weight.size,
                             name=self.name)
        h = T.conv_output_size(shape[1], kh, self.stride, self.padding)
        w = T.conv_output_size(shape[2], kw, self.stride, self.padding)
        return [spec], (o, h, w)


class BatchNorm(Module):
    """Full-precision batch normalization (never quantized)."""

    def __init__(self, c: int, name: str = "bn", momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(c, DTYPE), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(c, DTYPE), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(c, DTYPE)
        self.running_var = np.ones(c, DTYPE)
        self.momentum, self.eps = momentum, eps
        self.name = name

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=ctx.training, momentum=self.momentum, eps=self.eps,
                            update_stats=ctx.training and ctx.update_stats)

    def named_parameters(self, prefix=""):
        yield f"{prefix}{self.name}.gamma", self.gamma
        yield f"{prefix}{self.name}.beta", self.beta

    def named_buffers(self, prefix=""):
        yield f"{prefix}{self.name}.running_mean", self.running_mean
        yield f"{prefix}{self.name}.running_var", self.running_var


class Act(Module):
    """PACT activation; plain ReLU when quantization is bypassed."""

    def __init__(self, name: str = "act", pinned: bool = False, alpha: float = ALPHA_INIT):
        self.pact = PactActivation(alpha, name=f"{name}.alpha")
        self.pinned = pinned
        self.name = name

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        if ctx.precision is None:
            return T.relu(x)
        return self.pact(x, ctx.precision.act_bits(self.pinned))

    def named_parameters(self, prefix=""):
        yield f"{prefix}{self.name}.alpha", self.pact.alpha


class Sequential(Module):
    def __init__(self, layers: Sequence[Module]):
        self.layers = list(layers)

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        for layer in self.layers:
            x = layer(x, ctx)
        return x

    def named_parameters(self, prefix=""):
        for layer in self.layers:
            yield from layer.named_parameters(prefix)

    def named_buffers(self, prefix=""):
        for layer in self.layers:
            yield from layer.named_buffers(prefix)

    def cost_specs(self, shape):
        specs = []
        for layer in self.layers:
            s, shape = layer.cost_specs(shape)
            specs += s
        return specs, shape


class GlobalAvgPool(Module):
    def __call__(self, x, ctx):
        return T.global_avg_pool(x)

    def cost_specs(self, shape):
        return [], (shape[0],)


class BasicBlock(Module):
    """Two 3x3 conv/BN pairs with a parameter-free (subsample + zero-pad) shortcut."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng, name: str, out_pinned: bool, alpha: float):
        self.conv1 = Conv(c_in, c_out, 3, rng, stride=stride, name=f"{name}.conv1")
        self.bn1 = BatchNorm(c_out, name=f"{name}.bn1")
        self.act1 = Act(f"{name}.act1", alpha=alpha)
        self.conv2 = Conv(c_out, c_out, 3, rng, name=f"{name}.conv2")
        self.bn2 = BatchNorm(c_out, name=f"{name}.bn2")
        self.act2 = Act(f"{name}.act2", pinned=out_pinned, alpha=alpha)
        self.c_out, self.stride = c_out, stride
        self.parts = [self.conv1, self.bn1, self.act1, self.conv2, self.bn2]

    def __call__(self, x, ctx):
        y = x
        for p in self.parts:
            y = p(y, ctx)
        short = x if (self.stride == 1 and x.shape[1] == self.c_out) else T.shortcut_pad(x, self.c_out, self.stride)
        return self.act2(T.add(y, short), ctx)

    def named_parameters(self, prefix=""):
        for p in self.parts + [self.act2]:
            yield from p.named_parameters(prefix)

    def named_buffers(self, prefix=""):
        for p in (self.bn1, self.bn2):
            yield from p.named_buffers(prefix)

    def cost_specs(self, shape):
        s1, shape = self.conv1.cost_specs(shape)
        s2, shape = self.conv2.cost_specs(shape)
        return s1 + s2, shape


@dataclass
class ModelSpec:
    """Architecture description. First and last weight layers are always pinned."""

    arch: Literal["mlp", "cnn-small", "resnet-thin"] = "resnet-thin"
    widths: list[int] = field(default_factory=lambda: [128])
    channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    strides: list[int] = field(default_factory=lambda: [1, 2, 2])
    blocks_per_stage: int = 1
    pinned_bits: int = 8
    alpha_init: float = ALPHA_INIT

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"model.arch: unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        if self.pinned_bits < 1 or self.pinned_bits > FULL_PRECISION:
            raise ConfigError(f"model.pinned_bits must lie in [1, {FULL_PRECISION}], got {self.pinned_bits}")
        if self.arch != "mlp" and len(self.channels) != len(self.strides):
            raise ConfigError("model.channels and model.strides must have the same length")


class Model:
    """A network plus the metadata the harness needs (pinning, costs, state)."""

    def __init__(self, body: Sequential, spec: ModelSpec, input_shape: tuple[int, ...], classes: int):
        self.body = body
        self.spec = spec
        self.input_shape = tuple(input_shape)
        self.classes = classes
        self.pinned_bits = spec.pinned_bits
        self._params = list(body.named_parameters())
        self._buffers = list(body.named_buffers())
        names = [n for n, _ in self._params] + [n for n, _ in self._buffers]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in model")
        self.activations = [m for m in _walk(body) if isinstance(m, Act)]

    def __call__(self, x: Tensor, precision: Optional[Precision], training: bool = True,
                 update_stats: bool = True) -> Tensor:
        return self.body(x, Context(precision, training, update_stats))

    def precision(self, k_w: int, k_a: int) -> Precision:
        return Precision(k_w, k_a, self.pinned_bits)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self._params]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return list(self._buffers)

    def project(self) -> None:
        for a in self.activations:
            a.pact.project()

    def cost_spec(self) -> NetworkCostSpec:
        specs, _ = self.body.cost_specs(self.input_shape)
        pinned = (self.pinned_bits, self.pinned_bits)
        specs[0] = _pin(specs[0], pinned)
        specs[-1] = _pin(specs[-1], pinned)
        return NetworkCostSpec(tuple(specs))

    @property
    def weight_layers(self) -> list[Module]:
        return [m for m in _walk(self.body) if isinstance(m, (Conv, Dense))]

    @property
    def searchable_layers(self) -> list[Module]:
        return [m for m in self.weight_layers if not m.pinned]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self._params}
        out.update({n: b for n, b in self._buffers})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.state_arrays()
        missing = [n for n in own if n not in arrays]
        if strict and missing:
            raise KeyError(f"checkpoint lacks tensors: {missing[:5]}")
        for name, dst in own.items():
            if name in arrays:
                src = np.asarray(arrays[name], dtype=DTYPE)
                if src.shape != dst.shape:
                    raise ValueError(f"{name}: checkpoint shape {src.shape} != model shape {dst.shape}")
                dst[...] = src


def _pin(spec: LayerCostSpec, bits) -> LayerCostSpec:
    return LayerCostSpec(spec.kind, spec.filter_cardinality, spec.w_f, spec.h_f, spec.s_f,
                         spec.param_count, tuple(bits), spec.name)


def _walk(m: Module):
    yield m
    if isinstance(m, Sequential):
        for l in m.layers:
            yield from _walk(l)
    elif isinstance(m, BasicBlock):
        for p in m.parts + [m.act2]:
            yield from _walk(p)


def build_model(spec: ModelSpec, input_shape: Sequence[int], classes: int, rng: np.random.Generator) -> Model:
    """Kaiming-initialized network with quantizers on every weight layer and activation."""
    input_shape = tuple(int(s) for s in input_shape)
    a0 = spec.alpha_init
    if spec.arch == "mlp":
        dims = [int(np.prod(input_shape))] + list(spec.widths) + [classes]
        layers: list[Module] = []
        n = len(dims) - 1
        for i in range(n):
            layers.append(Dense(dims[i], dims[i + 1], rng, pinned=(i == 0 or i == n - 1), name=f"fc{i + 1}"))
            if i < n - 1:
                layers.append(Act(f"act{i + 1}", pinned=(i + 1 == n - 1), alpha=a0))
        body = Sequential(layers)
    elif spec.arch == "cnn-small":
        c_prev = input_shape[0]
        layers = []
        for i, (c, s) in enumerate(zip(spec.channels, spec.strides)):
            layers += [Conv(c_prev, c, 3, rng, stride=s, pinned=(i == 0), name=f"conv{i + 1}"),
                       BatchNorm(c, name=f"bn{i + 1}"),
                       Act(f"act{i + 1}", pinned=(i == len(spec.channels) - 1), alpha=a0)]
            c_prev = c
        layers += [Conv(c_prev, classes, 1, rng, pinned=True, name=f"conv{len(spec.channels) + 1}"),
                   GlobalAvgPool()]
        body = Sequential(layers)
    else:
        c0 = spec.channels[0]
        layers = [Conv(input_shape[0], c0, 3, rng, pinned=True, name="stem"),
                  BatchNorm(c0, name="stem_bn"),
                  Act("stem_act", alpha=a0)]
        c_prev = c0
        nstage = len(spec.channels)
        for si, (c, s) in enumerate(zip(spec.channels, spec.strides)):
            for bi in range(spec.blocks_per_stage):
                last = si == nstage - 1 and bi == spec.blocks_per_stage - 1
                layers.append(BasicBlock(c_prev, c, s if bi == 0 else 1, rng, f"s{si + 1}b{bi + 1}",
                                         out_pinned=last, alpha=a0))
                c_prev = c
        layers += [GlobalAvgPool(), Dense(c_prev, classes, rng, pinned=True, name="fc")]
        body = Sequential(layers)

    model = Model(body, spec, input_shape, classes)
    if not model.searchable_layers:
        logger.warning("model %s has no searchable layers: every weight layer is pinned at %d bits",
                       spec.arch, spec.pinned_bits)
    return model
