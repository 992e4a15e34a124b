"""Command-line entry point: ``python -m instancegm {synth,noise,train,eval,report}``.

Failures print a single JSON line to stderr, ``{"error": <kind>, "message": ...}``,
and exit with 2 for usage/config/path errors or 1 for runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import trainer
from .config import PROVENANCE, ConfigFileError, TrainConfig
from .datasets import (DatasetFormatError, MissingCleanLabelsError, inject_idn, inject_symmetric,
                       load_dataset, save_dataset, synth_shapes)

EXIT_USAGE = 2
EXIT_RUNTIME = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


TAG_LABELS = {"paper": "PAPER", "dividemix": "PAPER: DivideMix default", "desk": "desk-scale"}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("training configuration (override the --config file)")
    defaults = TrainConfig()
    for key, (tag, note) in PROVENANCE.items():
        value = getattr(defaults, key)
        typ = _bool if isinstance(value, bool) else type(value)
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", type=typ, default=None,
                           metavar=type(value).__name__.upper(),
                           help=f"{note}; default {value!r} [{TAG_LABELS[tag]}]")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="instancegm", description="Label-noise learning with a generative model and co-divide. "
                "`instancegm train --help` lists every configuration key.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic shapes dataset")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--side", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, type=Path)

    n = sub.add_parser("noise", help="corrupt the labels of a dataset")
    n.add_argument("--kind", choices=("idn", "symmetric"), required=True)
    n.add_argument("--rate", type=float, required=True)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--in", dest="src", required=True, type=Path)
    n.add_argument("--out", required=True, type=Path)

    t = sub.add_parser("train", help="warm up and train a dual model")
    t.add_argument("--data", required=True, type=Path, help="noisy training dataset dir")
    t.add_argument("--test", type=Path, help="held-out dataset dir with clean labels")
    t.add_argument("--config", type=Path, help="JSON file with flat TrainConfig keys")
    t.add_argument("--out", required=True, type=Path, help="run directory")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    _add_config_flags(t)

    e = sub.add_parser("eval", help="test accuracy of a checkpoint")
    e.add_argument("--run", required=True, type=Path, help="run directory or ckpt_<epoch> dir")
    e.add_argument("--epoch", type=int, help="checkpoint epoch (latest if omitted)")
    e.add_argument("--data", required=True, type=Path, help="dataset dir with clean labels")

    r = sub.add_parser("report", help="summarise runs into report.csv (+ plots)")
    r.add_argument("runs", nargs="+", type=Path)
    r.add_argument("--out", required=True, type=Path, help="output directory")
    r.add_argument("--plots", action="store_true", help="also write PNG curves and w histograms")
    return p


def _resolve_config(args) -> TrainConfig:
    base = TrainConfig.load(args.config).to_dict() if args.config else TrainConfig().to_dict()
    for key in PROVENANCE:
        value = getattr(args, f"cfg_{key}")
        if value is not None:
            base[key] = value
    return TrainConfig.from_dict(base)


def _need_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise UsageError(f"{what} {path} is not a directory")
    return path


def cmd_synth(args) -> int:
    ds = synth_shapes(args.classes, args.per_class, args.side, args.seed)
    save_dataset(ds, args.out)
    print(json.dumps({"out": str(args.out), "num_examples": len(ds)}))
    return 0


def cmd_noise(args) -> int:
    ds = load_dataset(_need_dir(args.src, "--in"))
    if not 0.0 <= args.rate <= 1.0:
        raise UsageError("--rate must be in [0, 1]")
    inject = inject_idn if args.kind == "idn" else inject_symmetric
    noisy = inject(ds, args.rate, args.seed)
    save_dataset(noisy, args.out)
    print(json.dumps({"out": str(args.out), "kind": args.kind,
                      "empirical_rate": float(noisy.flip_mask().mean())}))
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(_need_dir(args.data, "--data"))
    test = load_dataset(_need_dir(args.test, "--test")) if args.test else None
    if args.resume:
        result = trainer.resume(args.out, ds, test)
    else:
        cfg = _resolve_config(args)
        result = trainer.run(ds, cfg, test, run_dir=args.out)
    last = result.metrics[-1] if result.metrics else {}
    print(json.dumps({"run": str(args.out), "test_accuracy": last.get("test_accuracy"),
                      "codivide_auc": last.get("codivide_auc")}))
    return 0


def cmd_eval(args) -> int:
    run = _need_dir(args.run, "--run")
    if run.name.startswith("ckpt_"):
        ckpt = run
    else:
        epoch = args.epoch if args.epoch is not None else trainer.latest_checkpoint(run)
        ckpt = run / f"ckpt_{epoch}"
    dual, cfg, _, epoch = trainer.checkpoint_load(_need_dir(ckpt, "checkpoint"))
    acc = trainer.evaluate(trainer.final_classifier(dual, cfg), load_dataset(_need_dir(args.data, "--data")))
    print(json.dumps({"checkpoint": str(ckpt), "epoch": epoch, "test_accuracy": acc}))
    return 0


def cmd_report(args) -> int:
    for rd in args.runs:
        _need_dir(rd, "run")
        if not (rd / "config.json").is_file():
            raise UsageError(f"{rd} has no config.json")
    args.out.mkdir(parents=True, exist_ok=True)
    path = trainer.write_report(args.out / "report.csv", args.runs)
    written = [str(path)]
    if args.plots:
        from .plots import plot_runs
        written += [str(p) for p in plot_runs(args.runs, args.out)]
    print(json.dumps({"written": written}))
    return 0


COMMANDS = {"synth": cmd_synth, "noise": cmd_noise, "train": cmd_train, "eval": cmd_eval,
            "report": cmd_report}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    trainer.set_deterministic()
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    except ConfigFileError as e:
        return _fail("config", str(e), EXIT_USAGE)
    except (FileNotFoundError, DatasetFormatError, MissingCleanLabelsError,
            trainer.CheckpointError) as e:
        return _fail("input", str(e), EXIT_USAGE)
    except ValueError as e:
        return _fail("value", str(e), EXIT_USAGE)
    except (trainer.NumericError, RuntimeError) as e:
        return _fail("runtime", str(e), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
