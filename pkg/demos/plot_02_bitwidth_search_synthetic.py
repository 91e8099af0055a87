"""
Bit-width search on a synthetic loss landscape
==============================================

No network here: the task loss is a hand-written function of the integer
bit-widths, which makes the controller's behaviour easy to read.
"""

from adaqat.controller import BitWidthController, ControllerConfig


def barrier(k_w, k_a):
    # accuracy collapses below 4 weight bits, nothing else matters
    return 2.0 if k_w < 4 else 0.0


# %%
# Activations stay fixed at 8 bits; only the weight bit-width searches.
# The hardware term pushes it down one bit at a time until the barrier
# pushes back, after which the ceiling flips between 4 and 5.
ctrl = BitWidthController(ControllerConfig(search_a=False))
history = []
while not ctrl.done and len(history) < 100_000:
    rep = ctrl.step(barrier)
    history.append(rep.bits_w)

changes = [history[0]] + [b for a, b in zip(history, history[1:]) if a != b]
print("ceil(N_w) changes:", changes)
print(f"frozen at {ctrl.n_w.frozen_value} bits after {len(history)} steps")

# %%
# With a flat task loss only the hardware term acts and both bit-widths
# slide to the 1-bit floor.
ctrl = BitWidthController(ControllerConfig(lam=0.15))
steps = 0
while ctrl.bits != (1, 1):
    ctrl.step(lambda k_w, k_a: 1.0)
    steps += 1
print(f"flat landscape: reached {ctrl.bits} after {steps} steps")
