"""
Desk-scale MNIST: baseline, search from scratch, fine-tuning, lambda sweep
==========================================================================

Needs the MNIST IDX files under ``$ADAQAT_DATA_DIR/mnist`` (or pass the
directory as the first argument). Takes roughly a quarter of an hour on one
CPU core. Results land in ``runs/mnist-desk`` and are summarised in
``summary.json``.
"""

import json
import os
import sys
from pathlib import Path

from adaqat.config import load_config, with_overrides
from adaqat.train import fp32_config, run_experiment

here = Path(__file__).resolve().parent.parent
data_dir = sys.argv[1] if len(sys.argv) > 1 else os.environ.get("ADAQAT_DATA_DIR", "data")
out = Path(sys.argv[2]) if len(sys.argv) > 2 else here / "runs" / "mnist-desk"
base = load_config(here / "configs" / "mnist_resnet_thin.ini", [f"data.data_dir={data_dir}"])

# %%
# Full-precision baseline: every layer at the 32-bit pass-through.
fp = run_experiment(with_overrides(fp32_config(base), [f"experiment.out_dir={out / 'fp32'}"]))
print(f"fp32        top-1 {fp.top1:.4f}  ({fp.wall_clock_s / 60:.1f} min)")

# %%
# Bit-width search from scratch.
sc = run_experiment(with_overrides(base, [f"experiment.out_dir={out / 'scratch'}",
                                          f"experiment.baseline_acc={fp.top1}"]))
print(f"scratch     W/A {sc.weight_bits}/{sc.act_bits} frozen {sc.frozen_w}/{sc.frozen_a}  "
      f"top-1 {sc.top1:.4f}  delta {sc.delta_acc:+.4f}")

# %%
# Fine-tuning from the baseline weights (learning rate drops to 0.01).
ft = run_experiment(with_overrides(base, ["experiment.mode=finetune",
                                          f"experiment.checkpoint={out / 'fp32' / 'ckpt-final.bin'}",
                                          f"experiment.out_dir={out / 'finetune'}"]))
print(f"finetune    W/A {ft.weight_bits}/{ft.act_bits} frozen {ft.frozen_w}/{ft.frozen_a}  "
      f"top-1 {ft.top1:.4f}  delta {ft.delta_acc:+.4f}")

# %%
# Lambda sweep: a larger hardware weight should never buy more bits.
sweep = []
for lam in (0.1, 0.15, 0.2):
    r = sc if lam == base.controller.lam else run_experiment(
        with_overrides(base, [f"controller.lam={lam}", f"experiment.out_dir={out / f'lambda-{lam}'}"]))
    sweep.append({"lambda": lam, "W": r.weight_bits, "A": r.act_bits, "top1": r.top1})
    print(f"lambda {lam:<5} W/A {r.weight_bits}/{r.act_bits}  top-1 {r.top1:.4f}")

summary = {
    "fp32": {"top1": fp.top1, "minutes": fp.wall_clock_s / 60},
    "scratch": {"W": sc.weight_bits, "A": sc.act_bits, "frozen": [sc.frozen_w, sc.frozen_a], "top1": sc.top1,
                "wcr": sc.wcr, "bitops_g": sc.bitops_g},
    "finetune": {"W": ft.weight_bits, "A": ft.act_bits,
                 "frozen": [ft.frozen_w, ft.frozen_a], "top1": ft.top1},
    "sweep": sweep,
}
(out / "summary.json").write_text(json.dumps(summary, indent=2))
