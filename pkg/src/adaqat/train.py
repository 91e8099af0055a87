"""Training harness: quantization-aware training with learned bit-widths.

One iteration runs the quantized forward at the controller's current bits,
backpropagates through the straight-through quantizers, lets the controller
probe the floor configurations on the same batch (forward-only, weights
untouched), and finally applies SGD to the full-precision master weights.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_io
from .config import TrainConfig
from .controller import BitWidthController, ControllerReport
from .cost import hard_loss, summarize
from .data import (AugmentationPolicy, DatasetSplit, default_data_dir, iterate_batches, load_cifar10,
                   load_mnist, stratified_indices, synthetic_blobs)
from .models import Model, Precision, build_model
from .quantizers import FULL_PRECISION
from .tensor import SGD, Tensor, backward, cross_entropy_loss, no_grad, reset_tape

logger = logging.getLogger(__name__)

METRICS_FIELDS = ("epoch", "iteration", "task_loss", "hard_loss", "total_loss", "N_w", "N_a", "ceil_N_w",
                  "ceil_N_a", "frozen_w", "frozen_a", "train_acc", "val_acc", "lr", "extra_forward_passes")


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return base_lr * 0.5 * (1 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class MetricsRow:
    """One logged iteration.

    ``ceil_N_*`` are the integer bits the iteration's forward pass ran at and
    ``hard_loss`` is their product; ``N_*`` are the relaxed values after the
    controller update. ``val_acc`` is only filled on the last row of an epoch.
    """

    epoch: int
    iteration: int
    task_loss: float
    hard_loss: float
    total_loss: float
    N_w: float
    N_a: float
    ceil_N_w: int
    ceil_N_a: int
    frozen_w: bool
    frozen_a: bool
    train_acc: float
    val_acc: Optional[float]
    lr: float
    extra_forward_passes: int

    def to_csv(self) -> list[str]:
        out = []
        for name in METRICS_FIELDS:
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif isinstance(v, bool):
                out.append(str(int(v)))
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out

    @classmethod
    def from_csv(cls, row: dict[str, str]) -> "MetricsRow":
        kw = {}
        for f in dataclasses.fields(cls):
            raw = row[f.name]
            if f.name in ("epoch", "iteration", "ceil_N_w", "ceil_N_a", "extra_forward_passes"):
                kw[f.name] = int(raw)
            elif f.name in ("frozen_w", "frozen_a"):
                kw[f.name] = raw == "1"
            elif f.name == "val_acc":
                kw[f.name] = float(raw) if raw else None
            else:
                kw[f.name] = float(raw)
        return cls(**kw)


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricsRow.from_csv(r) for r in reader]


@dataclass
class StepReport:
    task_loss: float
    train_acc: float
    bits: tuple[int, int]
    lr: float
    controller: Optional[ControllerReport] = None


@dataclass
class TrainState:
    model: Model
    optimizer: SGD
    controller: BitWidthController
    rng: np.random.Generator
    lam: float = 0.15
    update_every: int = 1
    epoch: int = 0
    iteration: int = 0


def make_optimizer(model: Model, cfg: TrainConfig) -> SGD:
    names = [n for n, _ in model.named_parameters()]
    mask = [cfg.alpha_weight_decay or not n.endswith(".alpha") for n in names]
    return SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
               decay_mask=mask)


def loss_oracle(model: Model, xb: np.ndarray, yb: np.ndarray):
    """Side-effect-free task loss on a fixed batch at arbitrary searchable bits."""
    x = Tensor(xb)

    def loss_at(k_w: int, k_a: int) -> float:
        with no_grad():
            logits = model(x, model.precision(k_w, k_a), training=True, update_stats=False)
            return cross_entropy_loss(logits, yb).item()

    return loss_at


def _diagnose(state: TrainState, loss: float, bits) -> str:
    worst = max(((n, float(np.abs(p.data).max())) for n, p in state.model.named_parameters()), key=lambda t: t[1])
    return (f"non-finite loss {loss} at epoch {state.epoch} iteration {state.iteration}, bits {bits}; "
            f"largest |param| is {worst[0]} = {worst[1]:.4g}")


def train_step(state: TrainState, xb: np.ndarray, yb: np.ndarray, lr: float, quantize: bool = True) -> StepReport:
    """One QAT iteration; ``quantize=False`` runs the plain unquantized network instead."""
    model, opt, ctrl = state.model, state.optimizer, state.controller
    bits = ctrl.bits
    precision: Optional[Precision] = model.precision(*bits) if quantize else None

    reset_tape()
    opt.zero_grad()
    logits = model(Tensor(xb), precision, training=True)
    loss = cross_entropy_loss(logits, yb)
    task = loss.item()
    if not math.isfinite(task):
        reset_tape()
        raise FloatingPointError(_diagnose(state, task, bits))
    backward(loss)
    acc = float((logits.data.argmax(axis=1) == yb).mean())
    reset_tape()

    report = None
    if quantize and not ctrl.done and state.iteration % state.update_every == 0:
        report = ctrl.step(loss_oracle(model, xb, yb), main_loss=task)

    opt.step(lr)
    model.project()
    state.iteration += 1
    return StepReport(task, acc, bits, lr, report)


def evaluate(model: Model, split: DatasetSplit, bits: Optional[tuple[int, int]], batch_size: int = 500) -> dict:
    """Top-1 accuracy and mean task loss; ``bits=None`` evaluates the unquantized network."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    precision = model.precision(*bits) if bits is not None else None
    correct, loss_sum = 0, 0.0
    with no_grad():
        for xb, yb in iterate_batches(split, batch_size, min_batch=1):
            logits = model(Tensor(xb), precision, training=False)
            loss_sum += cross_entropy_loss(logits, yb).item() * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    n = len(split)
    return {"accuracy": correct / n, "loss": loss_sum / n, "n": n}


# ---------------------------------------------------------------------------
# checkpoints


def state_to_checkpoint(state: TrainState, cfg: TrainConfig, extra: dict | None = None) -> ckpt_io.Checkpoint:
    tensors = dict(state.model.state_arrays())
    for (name, _), v in zip(state.model.named_parameters(), state.optimizer.velocity):
        tensors[f"optim.velocity/{name}"] = v
    meta = {
        "epoch": state.epoch,
        "iteration": state.iteration,
        "controller": state.controller.state_dict(),
        "optimizer": {"lr": state.optimizer.lr, "momentum": state.optimizer.momentum,
                      "weight_decay": state.optimizer.weight_decay},
        "rng": state.rng.bit_generator.state,
        "config": cfg.to_dict(),
        "input_shape": list(state.model.input_shape),
        "classes": state.model.classes,
    }
    meta.update(extra or {})
    return ckpt_io.Checkpoint(tensors, meta)


def restore_state(state: TrainState, ck: ckpt_io.Checkpoint) -> None:
    """Load model, optimizer, controller and RNG state in place."""
    state.model.load_state_arrays(ck.tensors)
    for (name, _), v in zip(state.model.named_parameters(), state.optimizer.velocity):
        v[...] = ck.tensors[f"optim.velocity/{name}"]
    state.controller.load_state_dict(ck.meta["controller"])
    state.rng.bit_generator.state = ck.meta["rng"]
    state.epoch = ck.meta["epoch"]
    state.iteration = ck.meta["iteration"]


def model_from_checkpoint(ck: ckpt_io.Checkpoint) -> tuple[Model, TrainConfig]:
    cfg = TrainConfig.from_dict(ck.meta["config"])
    model = build_model(cfg.model, ck.meta["input_shape"], ck.meta["classes"], np.random.default_rng(0))
    model.load_state_arrays(ck.tensors)
    return model, cfg


# ---------------------------------------------------------------------------
# experiments


def load_datasets(cfg: TrainConfig) -> tuple[DatasetSplit, DatasetSplit]:
    d = cfg.data
    if d.dataset == "blobs":
        # one draw split in two, so train and test share cluster centers
        both = synthetic_blobs(d.blobs_classes, d.blobs_dims, d.blobs_train + d.blobs_test, seed=cfg.seed,
                               separation=d.blobs_separation)
        n = d.blobs_train
        return both.subset(np.arange(n)), both.subset(np.arange(n, n + d.blobs_test))
    root = d.data_dir or default_data_dir()
    if root is None:
        raise FileNotFoundError("no data directory: set data.data_dir, --data-dir or ADAQAT_DATA_DIR")
    root = Path(root)
    if d.dataset == "mnist":
        train, test = load_mnist(_subdir(root, "mnist"))
        if d.subset is not None:
            train = train.subset(stratified_indices(train.labels, d.subset, 10, cfg.seed))
    else:
        train, test = load_cifar10(_subdir(root, "cifar-10-batches-bin"), subset=d.subset, seed=cfg.seed)
    if d.val_subset is not None:
        test = test.subset(stratified_indices(test.labels, d.val_subset, test.class_count, cfg.seed))
    return train, test


def _subdir(root: Path, name: str) -> Path:
    return root / name if (root / name).is_dir() else root


def augmentation_for(cfg: TrainConfig, train: DatasetSplit) -> Optional[AugmentationPolicy]:
    """Pad-crop and flip for CIFAR-10 only; flipped or shifted digits and blob vectors make no sense."""
    if not cfg.data.augment or cfg.data.dataset != "cifar10":
        return None
    return AugmentationPolicy(pad_crop=cfg.data.padding > 0, padding=cfg.data.padding, flip_prob=cfg.data.flip_prob)


def init_state(cfg: TrainConfig, train: DatasetSplit) -> TrainState:
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    model = build_model(cfg.model, train.sample_shape, train.class_count, np.random.default_rng(seeds[0]))
    if cfg.mode == "finetune":
        src = ckpt_io.load(cfg.checkpoint)
        model.load_state_arrays(src.tensors, strict=False)
    return TrainState(model=model, optimizer=make_optimizer(model, cfg),
                      controller=BitWidthController(cfg.controller), rng=np.random.default_rng(seeds[1]),
                      lam=cfg.controller.lam, update_every=cfg.controller.update_every)


@dataclass
class ExperimentReport:
    weight_bits: int
    act_bits: int
    frozen_w: bool
    frozen_a: bool
    top1: float
    delta_acc: Optional[float]
    wcr: float
    bitops_g: float
    bitops_searched_g: float
    wall_clock_s: float
    seed: int
    epochs_run: int
    final_loss: float
    freeze_iteration_w: Optional[int] = None
    freeze_iteration_a: Optional[int] = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def run_experiment(cfg: TrainConfig, data: tuple[DatasetSplit, DatasetSplit] | None = None) -> ExperimentReport:
    """Full training run; writes metrics.csv, report.json and checkpoints to ``cfg.out_dir``."""
    t0 = time.perf_counter()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = data if data is not None else load_datasets(cfg)
    state = init_state(cfg, train)
    policy = augmentation_for(cfg, train)

    baseline = cfg.baseline_acc
    if cfg.mode == "finetune" and baseline is None:
        baseline = ckpt_io.load(cfg.checkpoint).meta.get("val_acc")

    metrics_path = out / "metrics.csv"
    freeze_it = {"w": None, "a": None}
    if cfg.resume:
        ck = ckpt_io.load(cfg.resume)
        restore_state(state, ck)
        freeze_it.update(ck.meta.get("freeze_iterations", {}))
        state.epoch += 1
        if not metrics_path.exists():
            raise FileNotFoundError(f"resuming needs the run's existing {metrics_path}")
    else:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRICS_FIELDS)

    val = {"accuracy": float("nan"), "loss": float("nan")}
    start = state.epoch
    for epoch in range(start, cfg.epochs):
        state.epoch = epoch
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        rows: list[MetricsRow] = []
        for xb, yb in iterate_batches(train, cfg.batch_size, state.rng, policy):
            it = state.iteration
            rep = train_step(state, xb, yb, lr)
            c = rep.controller
            kw, ka = rep.bits
            hl = hard_loss(kw, ka)
            nw, na = state.controller.n_w, state.controller.n_a
            if c is not None and c.froze_w:
                freeze_it["w"] = it
            if c is not None and c.froze_a:
                freeze_it["a"] = it
            rows.append(MetricsRow(epoch, it, rep.task_loss, hl, rep.task_loss + state.lam * hl, nw.value,
                                   na.value, kw, ka, nw.frozen, na.frozen, rep.train_acc, None, lr,
                                   c.extra_passes if c else 0))
        val = evaluate(state.model, test, state.controller.bits)
        if rows:
            rows[-1].val_acc = val["accuracy"]
        with open(metrics_path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for r in rows:
                w.writerow(r.to_csv())
        logger.info("epoch %d: lr %.4g, bits %s, val acc %.4f", epoch, lr, state.controller.bits, val["accuracy"])
        if (epoch + 1) % cfg.save_every == 0 or epoch == cfg.epochs - 1:
            ck = state_to_checkpoint(state, cfg, {"val_acc": val["accuracy"], "freeze_iterations": freeze_it})
            ckpt_io.save(out / f"ckpt-{epoch:03d}.bin", ck)

    kw, ka = state.controller.bits
    cost = summarize(state.model.cost_spec(), kw, ka)
    final = state_to_checkpoint(state, cfg, {"val_acc": val["accuracy"], "freeze_iterations": freeze_it})
    ckpt_io.save(out / "ckpt-final.bin", final)
    report = ExperimentReport(
        weight_bits=kw, act_bits=ka,
        frozen_w=state.controller.n_w.frozen, frozen_a=state.controller.n_a.frozen,
        top1=val["accuracy"],
        delta_acc=(val["accuracy"] - baseline) if baseline is not None else None,
        wcr=cost.wcr, bitops_g=cost.bitops_g, bitops_searched_g=cost.bitops_searched_g,
        wall_clock_s=time.perf_counter() - t0, seed=cfg.seed, epochs_run=cfg.epochs - start,
        final_loss=val["loss"], freeze_iteration_w=freeze_it["w"], freeze_iteration_a=freeze_it["a"],
        config=cfg.to_dict(),
    )
    (out / "report.json").write_text(report.to_json())
    return report


def fp32_config(cfg: TrainConfig) -> TrainConfig:
    """Full-precision baseline variant of ``cfg``: every layer at the 32-bit pass-through."""
    d = cfg.to_dict()
    d["model"]["pinned_bits"] = FULL_PRECISION
    d["controller"].update(search_w=False, search_a=False, init_w=float(FULL_PRECISION),
                           init_a=float(FULL_PRECISION))
    return TrainConfig.from_dict(d)
