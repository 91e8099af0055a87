"""Command-line front end: ``adaqat train | eval | sweep``.

Exit status is 0 on success, 2 for invalid input (bad config, missing data
directory, unreadable checkpoint, malformed arguments) and 1 when a run
fails at runtime.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import checkpoint as ckpt_io
from .controller import FractionalBitWidth
from .config import ConfigError, TrainConfig, load_config, with_overrides
from .data import default_data_dir
from .train import evaluate, fp32_config, load_datasets, model_from_checkpoint, run_experiment

logger = logging.getLogger("adaqat")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SWEEP_FIELDS = ("lambda", "W", "A", "top1", "frozen_w", "frozen_a", "out_dir")


class UsageError(Exception):
    """Bad user input; reported with exit status 2."""


def _fail(msg: str, code: int) -> int:
    print(f"adaqat: error: {msg}", file=sys.stderr)
    return code


def _common_overrides(args) -> list[str]:
    sets = list(args.set or [])
    if args.seed is not None:
        sets.append(f"experiment.seed={args.seed}")
    if args.out_dir is not None:
        sets.append(f"experiment.out_dir={args.out_dir}")
    if getattr(args, "data_dir", None) is not None:
        sets.append(f"data.data_dir={args.data_dir}")
    return sets


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config, _common_overrides(args))
    if getattr(args, "fp32", False):
        cfg = fp32_config(cfg)
    return cfg


def check_data_dir(cfg: TrainConfig) -> None:
    """Fail early, naming the path, when a file-backed dataset has no directory."""
    if cfg.data.dataset == "blobs":
        return
    root = cfg.data.data_dir or default_data_dir()
    if root is None:
        raise UsageError(f"no data directory for {cfg.data.dataset}: pass --data-dir or set ADAQAT_DATA_DIR")
    if not Path(root).is_dir():
        raise UsageError(f"data directory not found: {root}")


def check_checkpoint(cfg: TrainConfig) -> None:
    for label, path in (("checkpoint", cfg.checkpoint), ("resume", cfg.resume)):
        if path and not Path(path).is_file():
            raise UsageError(f"experiment.{label}: file not found: {path}")


def _run(cfg: TrainConfig):
    check_data_dir(cfg)
    check_checkpoint(cfg)
    return run_experiment(cfg)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    report = _run(cfg)
    print(json.dumps({"out_dir": cfg.out_dir, "W": report.weight_bits, "A": report.act_bits,
                      "top1": report.top1, "delta_acc": report.delta_acc, "wcr": report.wcr,
                      "bitops_g": report.bitops_g}, sort_keys=True))
    return EXIT_OK


def parse_bits(text: str) -> tuple[int, int]:
    try:
        w, a = (int(p) for p in text.replace("/", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bits must look like W,A (got {text!r})") from None
    if w < 1 or a < 1:
        raise argparse.ArgumentTypeError(f"bits must be >= 1 (got {text!r})")
    return w, a


def cmd_eval(args) -> int:
    try:
        ck = ckpt_io.load(args.checkpoint)
    except ckpt_io.CheckpointError as exc:
        raise UsageError(str(exc)) from None
    model, cfg = model_from_checkpoint(ck)
    if args.data_dir is not None:
        cfg = with_overrides(cfg, [f"data.data_dir={args.data_dir}"])
    check_data_dir(cfg)
    _, test = load_datasets(cfg)
    ctrl = ck.meta["controller"]
    bits = args.bits or (_bits_of(ctrl["n_w"]), _bits_of(ctrl["n_a"]))
    out = evaluate(model, test, bits)
    out.update(W=bits[0], A=bits[1], checkpoint=str(args.checkpoint), recorded_val_acc=ck.meta.get("val_acc"))
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def _bits_of(n: dict) -> int:
    return FractionalBitWidth.from_state_dict(n).bits


def parse_lambdas(text: str) -> list[float]:
    try:
        vals = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"lambdas must be a comma-separated list of numbers (got {text!r})")
    return vals


def _sweep_one(cfg_dict: dict) -> dict:
    cfg = TrainConfig.from_dict(cfg_dict)
    r = run_experiment(cfg)
    return {"lambda": cfg.controller.lam, "W": r.weight_bits, "A": r.act_bits, "top1": r.top1,
            "frozen_w": int(r.frozen_w), "frozen_a": int(r.frozen_a), "out_dir": cfg.out_dir}


def sweep_configs(base: TrainConfig, lambdas: Sequence[float]) -> list[TrainConfig]:
    root = Path(base.out_dir)
    return [with_overrides(base, [f"controller.lam={lam!r}", f"experiment.out_dir={root / f'lambda-{lam:g}'}"])
            for lam in lambdas]


def cmd_sweep(args) -> int:
    if len(args.lambdas) < 2:
        raise UsageError(f"a sweep needs at least two lambda values, got {args.lambdas}")
    base = resolve_config(args)
    check_data_dir(base)
    check_checkpoint(base)
    cfgs = sweep_configs(base, args.lambdas)
    table = Path(base.out_dir) / "sweep.csv"
    table.parent.mkdir(parents=True, exist_ok=True)
    with open(table, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(SWEEP_FIELDS)

    def record(row):
        with open(table, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([row[k] for k in SWEEP_FIELDS])
        print(json.dumps(row, sort_keys=True))

    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futures = [pool.submit(_sweep_one, c.to_dict()) for c in cfgs]
            try:
                for fut in futures:
                    record(fut.result())
            except Exception:
                for fut in futures:
                    fut.cancel()
                raise
    else:
        for c in cfgs:
            record(_sweep_one(c.to_dict()))
    logger.info("sweep table written to %s", table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaqat", description="Quantization-aware training with learned bit-widths.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_config=True):
        if with_config:
            sp.add_argument("--config", help="INI config file (defaults apply when omitted)")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override one config key; repeatable")
            sp.add_argument("--seed", type=int)
            sp.add_argument("--out-dir")
        sp.add_argument("--data-dir", help="dataset root (overrides ADAQAT_DATA_DIR)")

    t = sub.add_parser("train", help="run one experiment")
    common(t)
    t.add_argument("--fp32", action="store_true", help="train the full-precision baseline instead")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    e.add_argument("checkpoint")
    e.add_argument("--bits", type=parse_bits, help="override bits as W,A")
    common(e, with_config=False)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train once per lambda and tabulate the converged bits")
    common(s)
    s.add_argument("--lambdas", type=parse_lambdas, required=True, help="comma-separated, e.g. 0.1,0.15,0.2")
    s.add_argument("--parallel", type=int, default=1, help="number of independent worker processes")
    s.set_defaults(func=cmd_sweep, fp32=False)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        return _fail(str(exc), EXIT_USAGE)
    except ckpt_io.CheckpointError as exc:
        return _fail(str(exc), EXIT_USAGE)
    except KeyboardInterrupt:
        return _fail("interrupted", EXIT_RUNTIME)
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        logger.debug("run failed", exc_info=True)
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
