"""
End-to-end run on Gaussian blobs
================================

A seconds-long experiment that exercises the full harness (quantized
training, bit-width search, metrics, checkpoints) without any dataset files.
"""

import tempfile
from pathlib import Path

from adaqat.config import load_config
from adaqat.train import fp32_config, read_metrics, run_experiment

root = Path(tempfile.mkdtemp(prefix="adaqat-blobs-"))
cfg_path = Path(__file__).resolve().parent.parent / "configs" / "blobs_mlp.ini"

# %%
# Full-precision reference first.
base = load_config(cfg_path, [f"experiment.out_dir={root / 'fp32'}", "data.blobs_separation=3.0"])
fp = run_experiment(fp32_config(base))
print(f"fp32 top-1 {fp.top1:.3f}")

# %%
# Then the quantized run with learned bit-widths.
cfg = load_config(cfg_path, [f"experiment.out_dir={root / 'adaqat'}", "data.blobs_separation=3.0",
                             f"experiment.baseline_acc={fp.top1}"])
rep = run_experiment(cfg)
print(f"adaqat W/A = {rep.weight_bits}/{rep.act_bits}, top-1 {rep.top1:.3f} (delta {rep.delta_acc:+.3f}), "
      f"WCR {rep.wcr:.2f}x")

# %%
# The metrics stream has one row per iteration.
rows = read_metrics(root / "adaqat" / "metrics.csv")
for r in rows[:: max(1, len(rows) // 8)]:
    print(f"it {r.iteration:4d}  loss {r.task_loss:.3f}  N_w {r.N_w:.3f}  N_a {r.N_a:.3f}")
print("outputs in", root)
