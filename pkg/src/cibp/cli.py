"""Command-line entry point: ``cibp train``, ``cibp eval`` and ``cibp demo-wrapping``.

Progress and diagnostics go to standard error.  Machine-readable results
(metrics CSV, checkpoints, run manifest, evaluation report) go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import shlex
import sys
from contextlib import nullcontext
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from .attack import AttackConfig
from .data import DatasetFormatError, content_hash, load_cifar10, load_mnist, normalization_stats, synthetic
from .interval import wrapping_demo
from .network import CheckpointError, init, load_checkpoint, preset
from .trainer import NumericError, TrainConfig, cifar_config, evaluate, mnist_config, train

log = logging.getLogger("cibp")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

MANIFEST_NAME = "manifest.txt"

# Settings that describe the run but are not TrainConfig fields.
RUN_KEYS = ("dataset", "data_dir", "arch", "ramp_speedup", "synthetic_size", "synthetic_count")
# Informational manifest lines, ignored when a manifest is read back as a config file.
INFO_KEYS = ("version", "train_hash", "test_hash", "train_count", "test_count", "command")

# flag dest -> TrainConfig field, for flags whose names differ from the field
FLAG_TO_FIELD = {"lambda_": "lam"}


class UsageError(Exception):
    pass


# -- config files and manifests ----------------------------------------------


def _parse_value(text: str):
    text = text.strip()
    if text in ("", "None", "none"):
        return None
    if text in ("true", "True"):
        return True
    if text in ("false", "False"):
        return False
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _format_value(value) -> str:
    if value is None:
        return "None"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return value
    if isinstance(value, (tuple, list)):
        return json.dumps(list(value))
    return json.dumps(value)


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment.  Manifests are valid config files."""
    config = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    valid = set(RUN_KEYS) | {f.name for f in fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in INFO_KEYS:
            continue
        key = "lam" if key == "lambda" else key
        if key not in valid:
            raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
        config[key] = _parse_value(value)
    return config


def write_manifest(path, settings: dict, info: dict) -> None:
    lines = [f"# cibp run manifest; rerun with: cibp train --config {MANIFEST_NAME} --out <dir>"]
    lines += [f"{k}={_format_value(info[k])}" for k in INFO_KEYS if k in info]
    lines += [f"{k}={_format_value(v)}" for k, v in settings.items()]
    Path(path).write_text("\n".join(lines) + "\n")


# -- datasets ----------------------------------------------------------------


def load_dataset(name: str, data_dir, synthetic_size: int = 28, synthetic_count: int = 400, seed: int = 0):
    if name == "synthetic":
        return (
            synthetic(synthetic_count, seed=seed, split="train", size=synthetic_size),
            synthetic(max(synthetic_count // 4, 1), seed=seed, split="test", size=synthetic_size),
        )
    if data_dir is None:
        raise UsageError(f"--data-dir is required for --dataset {name}")
    if name == "mnist":
        return load_mnist(data_dir)
    if name == "cifar10":
        return load_cifar10(data_dir)
    raise UsageError(f"unknown dataset {name!r}")


# -- train -------------------------------------------------------------------


def _resolve_train_settings(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    from_file = read_config_file(args.config) if args.config else {}
    flags = {}
    for dest, value in vars(args).items():
        if value is None or dest in ("command", "config", "out", "threads", "func", "verbose", "argv"):
            continue
        flags[FLAG_TO_FIELD.get(dest, dest)] = value
    merged = {**from_file, **flags}

    dataset = merged.get("dataset")
    if dataset is None:
        raise UsageError("--dataset is required (on the command line or in the config file)")
    run = {
        "dataset": dataset,
        "data_dir": merged.get("data_dir"),
        "arch": merged.get("arch", "small"),
        "ramp_speedup": float(merged.get("ramp_speedup", 1.0)),
        "synthetic_size": int(merged.get("synthetic_size", 28)),
        "synthetic_count": int(merged.get("synthetic_count", 400)),
    }
    if run["ramp_speedup"] <= 0:
        raise UsageError("--ramp-speedup must be positive")
    overrides = {k: v for k, v in merged.items() if k not in RUN_KEYS}
    factory = cifar_config if dataset == "cifar10" else mnist_config
    try:
        cfg = factory(**overrides)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
    return {**run, **cfg.to_dict()}


def _config_from_settings(settings: dict) -> TrainConfig:
    cfg = TrainConfig.from_dict(settings)
    if settings["ramp_speedup"] != 1.0:
        cfg = replace(cfg, ramp_epochs=cfg.ramp_epochs / settings["ramp_speedup"])
    return cfg


def cmd_train(args) -> int:
    settings = _resolve_train_settings(args)
    cfg = _config_from_settings(settings)
    train_set, test_set = load_dataset(
        settings["dataset"], settings["data_dir"], settings["synthetic_size"], settings["synthetic_count"], cfg.seed
    )
    normalization = normalization_stats(train_set) if settings["dataset"] == "cifar10" else None
    try:
        spec = preset(settings["arch"], train_set.input_shape, train_set.num_classes, normalization)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    info = {
        "version": __version__,
        "train_hash": content_hash(train_set),
        "test_hash": content_hash(test_set),
        "train_count": len(train_set),
        "test_count": len(test_set),
        "command": shlex.join(["cibp", *args.argv]),
    }
    write_manifest(out / MANIFEST_NAME, settings, info)
    log.info("training %s/%s (%s) for %d epochs into %s", settings["dataset"], settings["arch"], cfg.loss, cfg.epochs, out)
    net = init(spec, cfg.seed)
    result = train(net, train_set, test_set, cfg, out_dir=out)
    last = result.history[-1]
    log.info("done: test_error=%.4f verified_error=%.4f", last.test_error, last.verified_test_error)
    return EXIT_OK


# -- eval --------------------------------------------------------------------


def cmd_eval(args) -> int:
    net, meta, _ = load_checkpoint(args.checkpoint)
    train_cfg = meta.get("config", {})
    seed = int(meta.get("seed", 0))
    _, test_set = load_dataset(args.dataset, args.data_dir, args.synthetic_size, args.synthetic_count, seed)
    if args.arch is not None:
        norm_layer = net.spec.layers[0] if net.spec.layers and net.spec.layers[0].kind == "normalize" else None
        normalization = (norm_layer.mean, norm_layer.std) if norm_layer else None
        try:
            expected = preset(args.arch, net.spec.input_shape, net.spec.num_classes, normalization)
        except ValueError:
            expected = None
        if expected != net.spec:
            raise CheckpointError(f"checkpoint {args.checkpoint} does not hold a {args.arch!r} network")
    if net.spec.num_classes != test_set.num_classes:
        raise CheckpointError(
            f"checkpoint has {net.spec.num_classes} classes, dataset {test_set.name!r} has {test_set.num_classes}"
        )
    if args.epsilon is not None:
        epsilon = args.epsilon
    else:
        epsilon = train_cfg.get("eval_epsilon") or train_cfg.get("epsilon")
        if epsilon is None:
            raise UsageError("--epsilon is required: the checkpoint records no training epsilon")
    clamp = tuple(train_cfg["clamp"]) if train_cfg.get("clamp") is not None else None
    attack = None
    if args.pgd:
        attack = AttackConfig(epsilon, iterations=args.pgd_iters, restarts=args.pgd_restarts, seed=args.seed)
    log.info("evaluating %s on %d %s examples at epsilon=%g", args.checkpoint, len(test_set), test_set.name, epsilon)
    report = evaluate(net, test_set, float(epsilon), attack, clamp)
    report = {
        "checkpoint": str(args.checkpoint),
        "dataset": test_set.name,
        "test_hash": content_hash(test_set),
        "count": len(test_set),
        **report,
    }
    if attack is not None:
        report.update(pgd_iterations=attack.iterations, pgd_restarts=attack.restarts, pgd_seed=attack.seed)
    report_path = Path(args.report) if args.report else Path(str(args.checkpoint) + ".eval.json")
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    line = f"epsilon={report['epsilon']:g} test_error={report['test_error']:.4f}"
    if "pgd_error" in report:
        line += f" pgd_error={report['pgd_error']:.4f}"
    line += f" verified_error={report['verified_error']:.4f}"
    print(line)
    log.info("report written to %s", report_path)
    return EXIT_OK


# -- demo --------------------------------------------------------------------


def cmd_demo_wrapping(args) -> int:
    if args.steps < 1:
        raise UsageError("--steps must be at least 1")
    halves = wrapping_demo(args.steps)
    print("step,half_width,growth_factor,sqrt2_pow_n")
    prev = 1.0
    for n, h in enumerate(halves, 1):
        print(f"{n},{h:.9f},{h / prev:.9f},{math.sqrt(2.0) ** n:.9f}")
        prev = h
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cibp", description="Interval bound propagation training and verification.")
    p.add_argument("--version", action="version", version=f"cibp {__version__}")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug-level progress on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    # Every train flag defaults to None so that "not given" falls through to the config file.
    t = sub.add_parser("train", help="train a network and write metrics, checkpoints and a manifest")
    t.add_argument("--config", help="key=value settings file; flags override it (a manifest.txt works too)")
    t.add_argument("--dataset", choices=["mnist", "cifar10", "synthetic"])
    t.add_argument("--data-dir")
    t.add_argument("--arch", choices=["small", "medium", "large"])
    t.add_argument("--loss", choices=["ibp", "constrained-ibp"])
    t.add_argument("--epsilon", type=float)
    t.add_argument("--eval-epsilon", type=float)
    t.add_argument("--lambda", dest="lambda_", type=float, help="width-penalty weight")
    t.add_argument("--penalty-reduction", choices=["mean", "sum"])
    t.add_argument("--warmup-epochs", type=float)
    t.add_argument("--ramp-epochs", type=float)
    t.add_argument("--ramp-speedup", type=float, help="divide the ramp length by this factor (e.g. 2.5)")
    t.add_argument("--kappa-end", type=float)
    t.add_argument("--optimizer", choices=["adam", "sgd"])
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--synthetic-size", type=int)
    t.add_argument("--synthetic-count", type=int)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="report test, PGD and verified error of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, choices=["mnist", "cifar10", "synthetic"])
    e.add_argument("--data-dir")
    e.add_argument("--arch", choices=["small", "medium", "large"], help="reject checkpoints of another architecture")
    e.add_argument("--epsilon", type=float, help="default: the checkpoint's evaluation epsilon")
    e.add_argument("--pgd", action="store_true", help="also run the PGD attack")
    e.add_argument("--pgd-iters", type=int, default=200)
    e.add_argument("--pgd-restarts", type=int, default=10)
    e.add_argument("--seed", type=int, default=0, help="PGD random-start seed")
    e.add_argument("--synthetic-size", type=int, default=28)
    e.add_argument("--synthetic-count", type=int, default=400)
    e.add_argument("--report", help="report path (default: <checkpoint>.eval.json)")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("demo-wrapping", help="print the interval growth of repeated 45-degree rotations")
    d.add_argument("--steps", type=int, default=4)
    d.set_defaults(func=cmd_demo_wrapping)
    return p


def _thread_limit(threads: int | None):
    if threads is None:
        return nullcontext()
    if threads < 1:
        raise UsageError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    args.argv = argv
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as e:
        print(f"cibp: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, CheckpointError, FileNotFoundError, IsADirectoryError) as e:
        print(f"cibp: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"cibp: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
