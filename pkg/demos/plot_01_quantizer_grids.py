"""
Quantizer grids and their straight-through gradients
=====================================================

Weights go through a tanh normalization before rounding; activations are
clipped at a learnable bound and rounded on a uniform grid.
"""

import numpy as np

from adaqat.quantizers import levels, pact_backward, pact_forward, quantize_unit, quantize_weights_forward

# %%
# The unit grid has 2**k points. Ties round away from zero, so 0.5 at two
# bits lands on 2/3 rather than 1/3.
for k in (1, 2, 3):
    print(k, "bits:", np.unique(quantize_unit(np.linspace(0, 1, 101), k)))
print("q(0.5, 2) =", quantize_unit(0.5, 2))

# %%
# Weights: any tensor maps into [-1, 1]; the largest magnitude hits an end point.
w = np.array([-1.3, -0.2, 0.0, 0.05, 0.7, 2.0], dtype=np.float32)
for k in (2, 3, 8):
    print(k, "bits:", quantize_weights_forward(w, k).round(4))

# %%
# PACT clips to [0, alpha] and rounds with step alpha / (2**k - 1).
x = np.linspace(-1, 3, 9, dtype=np.float32)
print("x      ", x)
print("pact k=2", pact_forward(x, 2.0, 2).round(3))

# %%
# Backward: the input gradient passes only inside the clip range, and
# everything above alpha contributes to alpha's gradient.
gx, ga = pact_backward(np.ones_like(x), x, 2.0)
print("x grad", gx, " alpha grad", ga)

# %%
# Worst-case rounding error shrinks as 1 / (2 s), s = 2**k - 1.
u = np.random.default_rng(0).random(10_000)
for k in range(1, 9):
    print(f"k={k}  max error {np.abs(quantize_unit(u, k) - u).max():.5f}  bound {1 / (2 * levels(k)):.5f}")
