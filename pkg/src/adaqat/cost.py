"""Hardware cost of a bit-width assignment: BitOPs, hardware loss and WCR.

Conventions
-----------
``w_f`` and ``h_f`` are the spatial extents of the filter itself and ``s_f``
its stride, so a layer's BitOPs are ``k_w * k_a * |f| * w_f * h_f / s_f**2``.
For a conv layer ``|f|`` counts the 2-D kernel slices (``out * in``), which
makes ``|f| * w_f * h_f`` the parameter count; dense layers use
``w_f = h_f = s_f = 1`` and ``|f| = param_count``.

Layers pinned to a fixed precision (the first and last layer) always use their
pinned bits. They are included in network totals and excluded from the
searched-only aggregate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

BASELINE_BITS = 32


def hard_loss(k_w: int, k_a: int) -> float:
    """Network-wide hardware penalty: the product of the two bit-widths."""
    if k_w < 1 or k_a < 1:
        raise ValueError(f"bit-widths must be >= 1, got ({k_w}, {k_a})")
    return float(k_w * k_a)


def hard_loss_grad(k_w: int, k_a: int) -> tuple[float, float]:
    """Partials of :func:`hard_loss` w.r.t. the integer weight and activation bits."""
    return float(k_a), float(k_w)


@dataclass(frozen=True)
class LayerCostSpec:
    kind: Literal["conv", "dense"]
    filter_cardinality: int
    w_f: int = 1
    h_f: int = 1
    s_f: int = 1
    param_count: int = 0
    pinned_bits: Optional[tuple[int, int]] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("conv", "dense"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.filter_cardinality < 1 or self.w_f < 1 or self.h_f < 1:
            raise ValueError(f"layer {self.name!r}: extents must be positive")
        if self.s_f < 1:
            raise ValueError(f"layer {self.name!r}: stride must be >= 1, got {self.s_f}")
        if self.kind == "dense" and (self.w_f, self.h_f, self.s_f) != (1, 1, 1):
            raise ValueError(f"dense layer {self.name!r} must use w_f = h_f = s_f = 1")
        if self.param_count == 0:
            object.__setattr__(self, "param_count", self.filter_cardinality * self.w_f * self.h_f)

    @property
    def pinned(self) -> bool:
        return self.pinned_bits is not None

    def bits(self, k_w: int, k_a: int) -> tuple[int, int]:
        return self.pinned_bits if self.pinned_bits is not None else (k_w, k_a)


@dataclass(frozen=True)
class NetworkCostSpec:
    layers: tuple[LayerCostSpec, ...]
    baseline_bits: int = BASELINE_BITS

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a network cost spec needs at least one layer")

    @property
    def searchable(self) -> tuple[LayerCostSpec, ...]:
        return tuple(l for l in self.layers if not l.pinned)


def bitops_layer(spec: LayerCostSpec, k_w: int, k_a: int) -> float:
    bw, ba = spec.bits(k_w, k_a)
    return bw * ba * spec.filter_cardinality * spec.w_f * spec.h_f / spec.s_f ** 2


def bitops_network(net: NetworkCostSpec, k_w: int, k_a: int, searched_only: bool = False) -> float:
    """Total BitOPs; pass ``searched_only`` to drop pinned layers from the sum."""
    layers = net.searchable if searched_only else net.layers
    return float(sum(bitops_layer(l, k_w, k_a) for l in layers))


def weight_compression_rate(net: NetworkCostSpec, k_w: int) -> float:
    """Baseline bits over the parameter-weighted mean weight bit-width."""
    if k_w < 1:
        raise ValueError(f"k_w must be >= 1, got {k_w}")
    total = sum(l.param_count for l in net.layers)
    bits = sum(l.param_count * (l.pinned_bits[0] if l.pinned else k_w) for l in net.layers)
    return net.baseline_bits * total / bits


@dataclass
class CostSummary:
    k_w: int
    k_a: int
    bitops_g: float
    bitops_searched_g: float
    wcr: float
    hard_loss: float = field(init=False)

    def __post_init__(self):
        self.hard_loss = hard_loss(self.k_w, self.k_a)


def summarize(net: NetworkCostSpec, k_w: int, k_a: int) -> CostSummary:
    return CostSummary(
        k_w=k_w,
        k_a=k_a,
        bitops_g=bitops_network(net, k_w, k_a) / 1e9,
        bitops_searched_g=bitops_network(net, k_w, k_a, searched_only=True) / 1e9,
        wcr=weight_compression_rate(net, k_w),
    )
