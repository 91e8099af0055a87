"""Uniform quantizers with straight-through gradients.

Weights use the DoReFa recipe: ``tanh`` squashes them, a max-normalization
brings them into ``[0, 1]``, and after rounding they are mapped back onto
``[-1, 1]``. Activations use a PACT clipped ReLU whose learnable upper bound
``alpha`` sets the quantization scale.

A bit-width of :data:`FULL_PRECISION` (32) is a sentinel that turns the
quantizer into a pass-through: weights are used as-is and the activation is a
plain ReLU.

Note on the PACT backward rule: the clipping-bound gradient flows where the
input *exceeds* alpha (the original PACT convention). A literal reading of
the indicator ``x <= alpha`` on both factors would zero the alpha gradient
exactly where clipping is active, which would leave alpha untrainable.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, custom_grad, relu

FULL_PRECISION = 32
NORM_EPS = 1e-12
ALPHA_INIT = 8.0
ALPHA_MIN = 1e-3


class DomainError(ValueError):
    """Input lies outside the domain a quantizer accepts."""


def _check_bits(k) -> int:
    if int(k) != k or k < 1:
        raise DomainError(f"bit-width must be an integer >= 1, got {k}")
    return int(k)


def levels(k: int) -> int:
    """Number of quantization steps, ``2**k - 1``."""
    return (1 << _check_bits(k)) - 1


def round_half_away(x):
    """Round to nearest integer; ties go away from zero."""
    x = np.asarray(x)
    return np.copysign(np.floor(np.abs(x) + x.dtype.type(0.5)), x)


def quantize_unit(x, k: int):
    """Quantize values in ``[0, 1]`` onto the grid ``{i / (2**k - 1)}``."""
    k = _check_bits(k)
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if np.any(arr < 0) or np.any(arr > 1) or np.any(np.isnan(arr)):
        raise DomainError("quantize_unit expects inputs in [0, 1]; normalize before quantizing")
    if k >= FULL_PRECISION:
        out = arr
    else:
        s = arr.dtype.type(levels(k))
        out = round_half_away(arr * s) / s
    return out.item() if np.ndim(x) == 0 else out


def _normalize(w: np.ndarray, eps: float):
    t = np.tanh(w)
    denom = DTYPE(2.0) * np.abs(t).max() + DTYPE(eps)
    return t, denom


def quantize_weights_forward(w: np.ndarray, k: int, eps: float = NORM_EPS) -> np.ndarray:
    """``2 q(f(w) + 1/2) - 1`` with ``f(w) = tanh(w) / (2 max|tanh(w)| + eps)``."""
    k = _check_bits(k)
    w = np.asarray(w, dtype=DTYPE)
    if w.size == 0:
        raise DomainError("cannot quantize an empty weight tensor")
    if k >= FULL_PRECISION:
        return w.copy()
    t, denom = _normalize(w, eps)
    u = np.clip(t / denom + DTYPE(0.5), 0, 1)
    return (DTYPE(2) * quantize_unit(u, k) - DTYPE(1)).astype(DTYPE)


def quantize_weights_backward(upstream: np.ndarray, w: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """STE gradient: rounding is the identity, the max-normalizer a constant."""
    upstream = np.asarray(upstream, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    if upstream.shape != w.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != weight shape {w.shape}")
    t, denom = _normalize(w, eps)
    return (upstream * DTYPE(2) * (DTYPE(1) - t * t) / denom).astype(DTYPE)


def quantize_weights(w: Tensor, k: int, eps: float = NORM_EPS) -> Tensor:
    """Differentiable weight quantizer; returns ``w`` itself at 32 bits."""
    if k >= FULL_PRECISION:
        return w
    wd = w.data
    return custom_grad((w,), quantize_weights_forward(wd, k, eps),
                       lambda g: (quantize_weights_backward(g, wd, eps),), op="quantize_weights")


def pact_forward(x, alpha: float, k: int) -> np.ndarray:
    """Clip to ``[0, alpha]`` then round onto ``{i * alpha / (2**k - 1)}``."""
    k = _check_bits(k)
    if not alpha > 0:
        raise DomainError(f"PACT clipping bound must be positive, got {alpha}")
    x = np.asarray(x, dtype=DTYPE)
    if k >= FULL_PRECISION:
        return np.maximum(x, DTYPE(0))
    a = DTYPE(alpha)
    y = np.clip(x, DTYPE(0), a)
    s = DTYPE(levels(k)) / a
    return np.minimum(round_half_away(y * s) / s, a).astype(DTYPE)


def pact_backward(upstream, x, alpha: float) -> tuple[np.ndarray, float]:
    """Return ``(x_grad, alpha_grad)`` for the quantized PACT activation."""
    upstream = np.asarray(upstream, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    a = DTYPE(alpha)
    inside = (x >= 0) & (x <= a)
    x_grad = np.where(inside, upstream, DTYPE(0))
    alpha_grad = float(upstream[x > a].sum(dtype=np.float64))
    return x_grad, alpha_grad


def pact(x: Tensor, alpha: Tensor, k: int) -> Tensor:
    """Differentiable PACT activation; a plain ReLU at 32 bits."""
    if k >= FULL_PRECISION:
        return relu(x)
    xd, a = x.data, float(alpha.data.reshape(-1)[0])
    ashape = alpha.shape

    def rule(g):
        gx, ga = pact_backward(g, xd, a)
        return gx, np.full(ashape, ga, dtype=DTYPE)

    return custom_grad((x, alpha), pact_forward(xd, a, k), rule, op="pact")


class WeightQuantizer:
    """DoReFa weight quantizer. Stateless apart from the normalization guard."""

    def __init__(self, eps: float = NORM_EPS):
        self.eps = eps

    def __call__(self, w: Tensor, k: int) -> Tensor:
        return quantize_weights(w, k, self.eps)


class PactActivation:
    """PACT activation owning one learnable clipping bound."""

    def __init__(self, alpha: float = ALPHA_INIT, name: str = "alpha", alpha_min: float = ALPHA_MIN):
        if not alpha > 0:
            raise DomainError(f"alpha must be positive, got {alpha}")
        self.alpha = Tensor(np.array([alpha], dtype=DTYPE), requires_grad=True, name=name)
        self.alpha_min = alpha_min

    def __call__(self, x: Tensor, k: int) -> Tensor:
        return pact(x, self.alpha, k)

    def project(self) -> None:
        """Keep alpha strictly positive after an optimizer step."""
        np.maximum(self.alpha.data, DTYPE(self.alpha_min), out=self.alpha.data)
