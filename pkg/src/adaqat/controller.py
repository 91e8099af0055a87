"""Learned network-wide bit-widths.

Two real-valued bit-widths ``N_w`` (weights) and ``N_a`` (activations) are
relaxed versions of the integer precisions ``ceil(N)`` that every quantizer
actually uses. The task loss is not differentiable in ``N``, so its slope is
estimated by a one-sided finite difference between the ceil and floor
integer configurations, evaluated on the same mini-batch with frozen
weights::

    dL_task/dN_w ~= L(ceil N_w, ceil N_a) - L(floor N_w, ceil N_a)

The hardware term ``lambda * ceil(N_w) * ceil(N_a)`` adds its analytic
partial, and ``N <- N - eta * grad`` moves the relaxed value.

Once ``ceil(N)`` starts bouncing between two adjacent integers the search
has found its level; after ``osc_threshold`` back-to-back reversals the bit
width is frozen at its current integer value and never changes again.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .cost import hard_loss_grad
from .quantizers import FULL_PRECISION

logger = logging.getLogger(__name__)

LossOracle = Callable[[int, int], float]

LOWER_EPS = 1e-6
HISTORY_LEN = 256


@dataclass
class ControllerConfig:
    eta_w: float = 0.001
    eta_a: float = 0.0005
    lam: float = 0.15
    osc_threshold: int = 10
    update_every: int = 1
    init_w: float = 8.0
    init_a: float = 8.0
    search_w: bool = True
    search_a: bool = True
    min_bits: int = 1
    max_bits: int = FULL_PRECISION

    def __post_init__(self):
        for name in ("eta_w", "eta_a", "init_w", "init_a"):
            if not getattr(self, name) > 0:
                raise ValueError(f"controller.{name} must be positive, got {getattr(self, name)}")
        if self.lam < 0:
            raise ValueError(f"controller.lambda must be nonnegative, got {self.lam}")
        if self.osc_threshold < 1 or self.update_every < 1:
            raise ValueError("controller.osc_threshold and controller.update_every must be >= 1")
        if not 1 <= self.min_bits <= self.max_bits:
            raise ValueError(f"controller bounds [{self.min_bits}, {self.max_bits}] are invalid")


@dataclass
class FractionalBitWidth:
    """A relaxed bit-width plus the state used to detect its convergence."""

    value: float
    lr: float
    min_bits: int = 1
    max_bits: int = FULL_PRECISION
    frozen: bool = False
    frozen_value: Optional[int] = None
    recent_ceils: deque = field(default_factory=lambda: deque(maxlen=HISTORY_LEN))
    oscillation_count: int = 0
    last_transition: Optional[tuple[int, int]] = None
    name: str = "N"

    def __post_init__(self):
        self.value = self.clamp(float(self.value))
        if not self.recent_ceils:
            self.recent_ceils.append(self.ceil)

    @classmethod
    def fixed(cls, bits: int, name: str = "N") -> "FractionalBitWidth":
        """A bit-width that is not searched: frozen from the start."""
        n = cls(value=float(bits), lr=1.0, min_bits=min(1, bits), max_bits=max(bits, FULL_PRECISION), name=name)
        n.frozen, n.frozen_value = True, int(bits)
        return n

    @property
    def lower(self) -> float:
        return self.min_bits - 1 + LOWER_EPS

    def clamp(self, v: float) -> float:
        return min(max(v, self.lower), float(self.max_bits))

    @property
    def ceil(self) -> int:
        c = math.ceil(self.value)
        return c if c > self.min_bits else self.min_bits

    @property
    def floor(self) -> int:
        """Lower integer neighbour, clamped to ``min_bits``."""
        f = math.floor(self.value)
        return f if f > self.min_bits else self.min_bits

    @property
    def bits(self) -> int:
        """The integer precision the network currently runs at."""
        return self.frozen_value if self.frozen else self.ceil

    @property
    def integral(self) -> bool:
        return self.floor == self.ceil

    def observe(self, c: int) -> None:
        """Record a new ``ceil`` observation and update the reversal counter.

        Only reversals between two adjacent integers (a -> b -> a) count; any
        other change of ``ceil`` resets the counter.
        """
        prev = self.recent_ceils[-1] if self.recent_ceils else None
        self.recent_ceils.append(c)
        if prev is None or c == prev:
            return
        if self.last_transition == (c, prev) and abs(c - prev) == 1:
            self.oscillation_count += 1
        else:
            self.oscillation_count = 0
        self.last_transition = (prev, c)

    def state_dict(self) -> dict:
        return {
            "value": self.value, "lr": self.lr, "min_bits": self.min_bits, "max_bits": self.max_bits,
            "frozen": self.frozen, "frozen_value": self.frozen_value,
            "recent_ceils": list(self.recent_ceils), "oscillation_count": self.oscillation_count,
            "last_transition": list(self.last_transition) if self.last_transition else None,
            "name": self.name,
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "FractionalBitWidth":
        n = cls(value=d["value"], lr=d["lr"], min_bits=d["min_bits"], max_bits=d["max_bits"], name=d["name"])
        n.value = d["value"]
        n.frozen, n.frozen_value = d["frozen"], d["frozen_value"]
        n.recent_ceils = deque(d["recent_ceils"], maxlen=HISTORY_LEN)
        n.oscillation_count = d["oscillation_count"]
        n.last_transition = tuple(d["last_transition"]) if d["last_transition"] else None
        return n


def oscillation_count(history) -> int:
    """Reference count of trailing adjacent-integer reversals in a ceil history."""
    changes = [history[0]] if len(history) else []
    for c in history[1:]:
        if c != changes[-1]:
            changes.append(c)
    count = 0
    for i in range(2, len(changes)):
        a, b, c = changes[i - 2], changes[i - 1], changes[i]
        count = count + 1 if (c == a and abs(b - a) == 1) else 0
    return count


def fd_gradient_w(loss_at: LossOracle, n_w: FractionalBitWidth, n_a: FractionalBitWidth,
                  loss_ceil: float | None = None) -> float:
    """Finite-difference slope of the task loss along the weight bit-width."""
    if n_w.integral:
        return 0.0
    ka = n_a.bits
    hi = loss_at(n_w.ceil, ka) if loss_ceil is None else loss_ceil
    return float(hi - loss_at(n_w.floor, ka))


def fd_gradient_a(loss_at: LossOracle, n_w: FractionalBitWidth, n_a: FractionalBitWidth,
                  loss_ceil: float | None = None) -> float:
    """Finite-difference slope of the task loss along the activation bit-width."""
    if n_a.integral:
        return 0.0
    kw = n_w.bits
    hi = loss_at(kw, n_a.ceil) if loss_ceil is None else loss_ceil
    return float(hi - loss_at(kw, n_a.floor))


def total_gradient(task_grad: float, hard_grad: float, lam: float) -> float:
    return task_grad + lam * hard_grad


def update(n: FractionalBitWidth, grad: float) -> None:
    """Gradient step ``N <- clamp(N - lr * grad)``; a no-op once frozen."""
    if n.frozen:
        logger.debug("%s is frozen at %s; update ignored", n.name, n.frozen_value)
        return
    n.value = n.clamp(n.value - n.lr * grad)
    n.observe(n.ceil)


def detect_and_freeze(n: FractionalBitWidth, threshold: int) -> bool:
    if not n.frozen and n.oscillation_count >= threshold:
        n.frozen, n.frozen_value = True, n.recent_ceils[-1]
        logger.info("%s frozen at %d bits after %d oscillations", n.name, n.frozen_value, n.oscillation_count)
    return n.frozen


@dataclass
class ControllerReport:
    task_grad_w: float = 0.0
    task_grad_a: float = 0.0
    grad_w: float = 0.0
    grad_a: float = 0.0
    value_w: float = 0.0
    value_a: float = 0.0
    bits_w: int = 0
    bits_a: int = 0
    froze_w: bool = False
    froze_a: bool = False
    extra_passes: int = 0
    clamped_floor: bool = False
    skipped: bool = False


class BitWidthController:
    """Owns ``N_w`` / ``N_a`` and applies one search step per call."""

    def __init__(self, config: ControllerConfig | None = None):
        self.config = config or ControllerConfig()
        c = self.config
        if c.search_w:
            self.n_w = FractionalBitWidth(c.init_w, c.eta_w, c.min_bits, c.max_bits, name="N_w")
        else:
            self.n_w = FractionalBitWidth.fixed(int(math.ceil(c.init_w)), name="N_w")
        if c.search_a:
            self.n_a = FractionalBitWidth(c.init_a, c.eta_a, c.min_bits, c.max_bits, name="N_a")
        else:
            self.n_a = FractionalBitWidth.fixed(int(math.ceil(c.init_a)), name="N_a")

    @property
    def bits(self) -> tuple[int, int]:
        return self.n_w.bits, self.n_a.bits

    @property
    def done(self) -> bool:
        return self.n_w.frozen and self.n_a.frozen

    def step(self, loss_at: LossOracle, main_loss: float | None = None) -> ControllerReport:
        return controller_step(loss_at, self.n_w, self.n_a, self.config, main_loss)

    def state_dict(self) -> dict:
        return {"n_w": self.n_w.state_dict(), "n_a": self.n_a.state_dict()}

    def load_state_dict(self, d: dict) -> None:
        self.n_w = FractionalBitWidth.from_state_dict(d["n_w"])
        self.n_a = FractionalBitWidth.from_state_dict(d["n_a"])


def controller_step(loss_at: LossOracle, n_w: FractionalBitWidth, n_a: FractionalBitWidth,
                    config: ControllerConfig, main_loss: float | None = None) -> ControllerReport:
    """One bit-width update.

    ``loss_at(k_w, k_a)`` must evaluate the task loss on the current batch
    without touching any parameter. ``main_loss``, when given, is the loss of
    the training forward at the current bits and saves one evaluation; it is
    not counted as an extra pass.
    """
    rep = ControllerReport()
    bw, ba = n_w.bits, n_a.bits
    if n_w.frozen and n_a.frozen:
        rep.value_w, rep.value_a = n_w.value, n_a.value
        rep.bits_w, rep.bits_a = bw, ba
        rep.skipped = True
        return rep

    need_w = not n_w.frozen and not n_w.integral
    need_a = not n_a.frozen and not n_a.integral
    rep.clamped_floor = (not n_w.frozen and math.floor(n_w.value) < n_w.min_bits) or \
                        (not n_a.frozen and math.floor(n_a.value) < n_a.min_bits)
    if (need_w or need_a) and main_loss is None:
        main_loss = loss_at(bw, ba)

    if need_w:
        rep.task_grad_w = fd_gradient_w(loss_at, n_w, n_a, main_loss)
        rep.extra_passes += 1
    if need_a:
        rep.task_grad_a = fd_gradient_a(loss_at, n_w, n_a, main_loss)
        rep.extra_passes += 1

    hw_w, hw_a = hard_loss_grad(bw, ba)
    rep.grad_w = total_gradient(rep.task_grad_w, hw_w, config.lam)
    rep.grad_a = total_gradient(rep.task_grad_a, hw_a, config.lam)

    was_w, was_a = n_w.frozen, n_a.frozen
    update(n_w, rep.grad_w)
    update(n_a, rep.grad_a)
    rep.froze_w = detect_and_freeze(n_w, config.osc_threshold) and not was_w
    rep.froze_a = detect_and_freeze(n_a, config.osc_threshold) and not was_a

    rep.value_w, rep.value_a = n_w.value, n_a.value
    rep.bits_w, rep.bits_a = n_w.bits, n_a.bits
    return rep
