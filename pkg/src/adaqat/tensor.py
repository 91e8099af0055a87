"""Minimal float32 tensor library with tape-based reverse-mode autodiff.

Every differentiable operation appends a :class:`Node` to the active
:class:`Tape`. :func:`backward` walks the tape in reverse append order, so the
topological order is simply the order in which the forward pass executed.
Quantizers hook in through :func:`custom_grad`, which lets a caller pair an
arbitrary forward value with a hand-written backward rule (the STE).
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GeometryError(ValueError):
    """A convolution or pooling geometry produces an empty output."""


class ContractError(RuntimeError):
    """An API precondition was violated (non-scalar loss, missing gradient...)."""


class Tensor:
    """Dense float32 array plus the bookkeeping needed for backprop.

    Leaf tensors created with ``requires_grad=True`` are parameters and
    accumulate into ``.grad``. Intermediate tensors carry a ``node`` pointing
    at the tape record that produced them and never store a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass(eq=False)
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    op: str
    index: int = -1


@dataclass
class Tape:
    """Append-only record of executed operations."""

    nodes: list[Node] = field(default_factory=list)
    enabled: bool = True

    def record(self, node: Node) -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.reset()


@contextlib.contextmanager
def no_grad():
    """Run the enclosed forward computation without recording anything."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _TAPE.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(inputs=inputs, output=out, backward=bwd, op=op)
        _TAPE.record(node)
        out.node = node
    return out


def custom_grad(inputs: Sequence[Tensor], value: np.ndarray, rule: BackwardFn, op: str = "custom") -> Tensor:
    """Attach a hand-written backward ``rule`` to a precomputed forward ``value``.

    ``rule`` maps the upstream gradient to one gradient per input (or None).
    Returned gradients must match the input shapes.
    """
    inputs = tuple(inputs)

    def checked(g):
        grads = rule(g)
        if len(grads) != len(inputs):
            raise ContractError(f"{op}: backward returned {len(grads)} grads for {len(inputs)} inputs")
        for t, gi in zip(inputs, grads):
            if gi is not None and np.shape(gi) != t.shape:
                raise ShapeError(f"{op}: backward grad shape {np.shape(gi)} != input shape {t.shape}")
        return grads

    return _make(op, np.asarray(value, dtype=DTYPE), inputs, checked)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tape-attached leaf's ``.grad``."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("backward() called on a tensor that is not attached to the tape")
    tape = _TAPE
    if loss.node.index >= len(tape.nodes) or tape.nodes[loss.node.index] is not loss.node:
        raise ContractError("loss node is no longer on the tape (was the tape reset?)")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=DTYPE)
            if inp.node is None:
                if inp.grad is None:
                    inp.grad = gi.copy()
                else:
                    inp.grad += gi
            else:
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Tensor:
    """Same-shape addition, or adding a python scalar."""
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        return _make("add_scalar", a.data + DTYPE(b), (a,), lambda g: (g,))
    a = _as_tensor(a)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = DTYPE(b)
        return _make("mul_scalar", a.data * c, (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make("sum", np.asarray(a.data.sum(dtype=DTYPE)), (a,), lambda g: (np.full(shape, g, dtype=DTYPE),))


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make("mean", np.asarray(a.data.mean(dtype=DTYPE)), (a,),
                 lambda g: (np.full(shape, g / DTYPE(n), dtype=DTYPE),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, DTYPE(0)), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make("tanh", t, (a,), lambda g: (g * (1 - t * t),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1 (the only broadcast supported)."""
    c = x.shape[1]
    if bias.shape != (c,):
        raise ShapeError(f"bias_add: bias shape {bias.shape} does not match channel axis of {x.shape}")
    view = (1, c) + (1,) * (x.data.ndim - 2)
    red = tuple(i for i in range(x.data.ndim) if i != 1)
    return _make("bias_add", x.data + bias.data.reshape(view), (x, bias),
                 lambda g: (g, g.sum(axis=red, dtype=DTYPE)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T (+ b)`` with ``w`` stored as (out, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    out = _make("linear", xd @ wd.T, (x, w), lambda g: (g @ wd, g.T @ xd))
    return bias_add(out, b) if b is not None else out


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, H', W', kh, kw) -> (N, H', W', C, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x: Tensor, f: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N,C,H,W) with filters ``f`` (O,C,kh,kw)."""
    if x.data.ndim != 4 or f.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and filter, got {x.shape} and {f.shape}")
    n, c, h, w = x.shape
    o, cf, kh, kw = f.shape
    if c != cf:
        raise ShapeError(f"conv2d: input channels {c} != filter channels {cf} ({x.shape} vs {f.shape})")
    if stride < 1 or padding < 0:
        raise GeometryError(f"conv2d: invalid stride={stride} padding={padding}")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise GeometryError(f"conv2d: {kh}x{kw} filter with stride {stride}, padding {padding} "
                            f"gives empty output on {h}x{w} input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride).reshape(n * ho * wo, c * kh * kw)
    fmat = f.data.reshape(o, c * kh * kw)
    out = (cols @ fmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gf = (g2.T @ cols).reshape(f.shape)
        gcols = (g2 @ fmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gf

    return _make("conv2d", np.ascontiguousarray(out), (x, f), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N,C,H,W) -> (N,C)."""
    n, c, h, w = x.shape
    scale = DTYPE(1.0 / (h * w))
    return _make("gap", x.data.mean(axis=(2, 3), dtype=DTYPE), (x,),
                 lambda g: (np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)).copy(),))


def shortcut_pad(x: Tensor, out_channels: int, stride: int) -> Tensor:
    """Parameter-free residual shortcut: spatial subsampling plus zero channel padding."""
    n, c, h, w = x.shape
    extra = out_channels - c
    if extra < 0:
        raise ShapeError(f"shortcut_pad: cannot shrink {c} channels to {out_channels}")
    lo = extra // 2
    sub = x.data[:, :, ::stride, ::stride]
    out = np.zeros((n, out_channels) + sub.shape[2:], dtype=DTYPE)
    out[:, lo:lo + c] = sub

    def bwd(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[:, :, ::stride, ::stride] = g[:, lo:lo + c]
        return (gx,)

    return _make("shortcut_pad", out, (x,), bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization over every axis except axis 1.

    In training mode batch statistics are used, and the running buffers are
    updated in place only when ``update_stats`` is set.
    """
    axes = (0,) + tuple(range(2, x.data.ndim))
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes, dtype=DTYPE)
        var = x.data.var(axis=axes, dtype=DTYPE)
        if update_stats:
            m = x.data.size // x.shape[1]
            running_mean *= DTYPE(1 - momentum)
            running_mean += DTYPE(momentum) * mu
            running_var *= DTYPE(1 - momentum)
            running_var += DTYPE(momentum) * var * DTYPE(m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (DTYPE(1.0) / np.sqrt(var + DTYPE(eps))).astype(DTYPE)
    xhat = (x.data - mu.reshape(view)) * inv.reshape(view)
    out = xhat * gamma.data.reshape(view) + beta.data.reshape(view)
    gd = gamma.data

    def bwd(g):
        ggamma = (g * xhat).sum(axis=axes, dtype=DTYPE)
        gbeta = g.sum(axis=axes, dtype=DTYPE)
        gxhat = g * gd.reshape(view)
        if training:
            m = DTYPE(x.data.size // x.shape[1])
            gx = (inv.reshape(view) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True, dtype=DTYPE)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True, dtype=DTYPE)
            )
        else:
            gx = gxhat * inv.reshape(view)
        return gx, ggamma, gbeta

    return _make("batch_norm", out.astype(DTYPE), (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# losses


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_loss: logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy_loss: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise IndexError(f"cross_entropy_loss: label {bad} outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean(dtype=DTYPE)

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (p * (g / DTYPE(n)),)

    return _make("cross_entropy", np.asarray(loss, dtype=DTYPE), (logits,), bwd)


# ---------------------------------------------------------------------------
# optimization


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


class SGD:
    """SGD with heavy-ball momentum and coupled L2 weight decay.

    ``v <- momentum * v + (grad + weight_decay * param)``, ``param <- param - lr * v``.
    ``decay_mask`` can exempt individual parameters from weight decay.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, decay_mask: Sequence[bool] | None = None):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_mask = list(decay_mask) if decay_mask is not None else [True] * len(self.params)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self, lr: float | None = None) -> None:
        lr = DTYPE(self.lr if lr is None else lr)
        mom = DTYPE(self.momentum)
        for p, v, decay in zip(self.params, self.velocity, self.decay_mask):
            if p.grad is None:
                raise ContractError(f"parameter {p.name or p.shape} has no gradient; call zero_grad/backward first")
            d = p.grad
            if decay and self.weight_decay:
                d = d + DTYPE(self.weight_decay) * p.data
            v *= mom
            v += d
            p.data -= lr * v


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Functional single SGD step; returns the (updated) velocity buffers."""
    opt = SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if velocity is not None:
        opt.velocity = velocity
    opt.step()
    return opt.velocity
