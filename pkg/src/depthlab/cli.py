"""Command-line entry point: generate-data, train, eval, infer, benchmark, gradcheck.

Every subcommand accepts ``--config file.json``. Flags given on the command
line override the file. Nested settings are reachable through the ``train``,
``network`` and ``sparsify`` sections of the file or ``--set section.key=value``.

Exit codes: 0 ok, 2 configuration or usage error, 3 data error, 4 check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataset_io import DatasetFormatError, Manifest, generate_dataset
from .evaluation import benchmark, evaluate, infer_directory
from .gradcheck import CASES, run_gradcheck
from .networks import ConfigMismatchError, DepthNet, ModelKind, NetworkConfig
from .synth import SparsifyConfig
from .tensor import EmptySupportError
from .trainer import TrainConfig, TrainConfigError, pretrain_then_adapt, train, write_json

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4


class ConfigError(ValueError):
    """Bad or inconsistent configuration."""


class DataError(RuntimeError):
    """Missing or malformed input data."""


class UsageError(ConfigError):
    """A required option is missing; the subcommand usage is printed."""


# -- configuration -----------------------------------------------------------------

def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            config = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return config


def _apply_sets(config: dict, assignments: list) -> None:
    for item in assignments or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        *sections, leaf = key.split(".")
        node = config
        for s in sections:
            node = node.setdefault(s, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {s} is not a section")
        node[leaf] = value


def _resolve(args, flag_map: dict) -> dict:
    """Config file merged with ``--set`` and explicit flags (highest precedence)."""
    config = _load_config(args.config)
    _apply_sets(config, args.set)
    for dest, target in flag_map.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        *sections, leaf = target.split(".")
        node = config
        for s in sections:
            node = node.setdefault(s, {})
        node[leaf] = value
    return config


def _pop_section(config: dict, name: str) -> dict:
    section = config.pop(name, {}) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(section)


def _build(cls, section: dict, name: str):
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad {name} settings: {exc}") from exc


def _reject_unknown(config: dict, allowed: set) -> None:
    unknown = sorted(set(config) - allowed)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {unknown}")


def _require(config: dict, *keys: str) -> None:
    missing = [k for k in keys if config.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _checkpoint_file(path: str, name: str = "depth.ckpt") -> str:
    p = Path(path)
    if p.is_dir():
        p = p / name
    if not p.is_file():
        raise DataError(f"checkpoint {p} not found")
    return str(p)


def _manifest(root: str) -> Manifest:
    try:
        return Manifest.load(root)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load dataset at {root}: {exc}") from exc


def _resolution(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    try:
        h, w = str(text).lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise ConfigError(f"resolution must look like 96x320, got {text!r}") from exc


def _emit(result: dict, out_file: str | None = None) -> None:
    if out_file:
        write_json(out_file, result)
    print(json.dumps(result, indent=1, sort_keys=True))


# -- subcommands ---------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    config = _resolve(args, {"out": "out", "seed": "seed", "n_train": "n_train", "n_val": "n_val",
                             "height": "height", "width": "width", "n_frames": "n_frames",
                             "gt_top_mask": "sparsify.gt_top_mask", "num_lines": "sparsify.num_lines"})
    sparsify = _build(SparsifyConfig, _pop_section(config, "sparsify"), "sparsify")
    _reject_unknown(config, {"out", "seed", "n_train", "n_val", "height", "width", "n_frames"})
    _require(config, "out")
    height, width = int(config.get("height", 96)), int(config.get("width", 320))
    if height % 32 or width % 32:
        raise ConfigError(f"height and width must be divisible by 32, got {height}x{width}")
    manifest = generate_dataset(config["out"], int(config.get("n_train", 16)), int(config.get("n_val", 4)),
                                seed=int(config.get("seed", 0)), height=height, width=width,
                                sparsify=sparsify, n_frames=int(config.get("n_frames", 3)))
    _emit({"root": manifest.root, "train": len(manifest.split("train")), "val": len(manifest.split("val"))})
    return EXIT_OK


TRAIN_FLAGS = {
    "data": "data", "out": "out", "model": "model", "init": "init", "resume": "resume",
    "adapt_data": "adapt_data", "adapt_regime": "adapt_regime",
    "regime": "train.regime", "epochs": "train.epochs", "batch_size": "train.batch_size", "lr": "train.lr0",
    "lr_half_life": "train.lr_half_life_epochs", "weight_decay": "train.weight_decay", "seed": "train.seed",
    "max_steps": "train.max_steps", "flip_prob": "train.flip_prob", "eval_every": "train.eval_every",
    "keep_last": "train.keep_last",
}


def cmd_train(args) -> int:
    config = _resolve(args, TRAIN_FLAGS)
    if args.crop is not None:
        config.setdefault("train", {})["crop"] = list(_resolution(args.crop))
    train_section = _pop_section(config, "train")
    network = _build(NetworkConfig, _pop_section(config, "network"), "network")
    adapt_section = _pop_section(config, "adapt")
    _reject_unknown(config, {"data", "out", "model", "init", "resume", "adapt_data", "adapt_regime"})
    _require(config, "data", "out")
    try:
        train_config = TrainConfig(**train_section)
        kind = ModelKind(config.get("model", "segguided"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train settings: {exc}") from exc
    manifest = _manifest(config["data"])
    adapt_data = config.get("adapt_data")
    if adapt_data:
        if config.get("init") or config.get("resume"):
            raise ConfigError("--adapt-data runs both phases from scratch; drop --init/--resume")
        merged = {**train_config.to_dict(), **adapt_section}
        merged["regime"] = config.get("adapt_regime") or merged.get("regime")
        if merged["regime"] == "synthetic":
            raise ConfigError("--adapt-data needs --adapt-regime (supervised, self_supervised or semi_supervised)")
        try:
            adapt_config = TrainConfig(**merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad adapt settings: {exc}") from exc
        result = pretrain_then_adapt(manifest, _manifest(adapt_data), kind, train_config, adapt_config,
                                     config["out"], network)
        _emit({"best": result})
        return EXIT_OK
    init = _checkpoint_file(config["init"]) if config.get("init") else None
    result = train(manifest, kind, train_config, config["out"], network, init_checkpoint=init,
                   resume=bool(config.get("resume")))
    _emit({"best": result.best_dir, "last": result.last_dir, "log": result.log_path})
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _resolve(args, {"data": "data", "split": "split", "checkpoint": "checkpoint", "out": "out",
                             "gt_key": "gt_key", "oracle": "oracle", "batch_size": "batch_size",
                             "no_images": "no_images"})
    _reject_unknown(config, {"data", "split", "checkpoint", "out", "gt_key", "oracle", "batch_size", "no_images"})
    oracle = bool(config.get("oracle"))
    _require(config, "data", *(() if oracle else ("checkpoint",)))
    if config.get("gt_key", "gt") not in ("gt", "gt_full"):
        raise ConfigError("gt_key must be gt or gt_full")
    checkpoint = None if oracle else _checkpoint_file(config["checkpoint"])
    report = evaluate(_manifest(config["data"]), config.get("split", "val"), checkpoint, config.get("out"),
                      gt_key=config.get("gt_key", "gt"), oracle=oracle,
                      batch_size=int(config.get("batch_size", 4)), write_images=not config.get("no_images"))
    _emit({"aggregate": report["aggregate"], "samples": len(report["samples"])})
    return EXIT_OK


def cmd_infer(args) -> int:
    config = _resolve(args, {"checkpoint": "checkpoint", "sample": "sample", "out": "out"})
    _reject_unknown(config, {"checkpoint", "sample", "out"})
    _require(config, "checkpoint", "sample", "out")
    sample = Path(config["sample"])
    if not (sample / "sparse.pgm").is_file():
        raise DataError(f"{sample} has no sparse.pgm")
    try:
        depth = infer_directory(_checkpoint_file(config["checkpoint"]), str(sample), config["out"])
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    _emit({"out": config["out"], "min_m": float(depth.min()), "max_m": float(depth.max())})
    return EXIT_OK


def cmd_benchmark(args) -> int:
    config = _resolve(args, {"checkpoint": "checkpoints", "resolution": "resolution", "iterations": "iterations",
                             "warmup": "warmup", "train_batch": "train_batch", "out": "out"})
    network = _build(NetworkConfig, _pop_section(config, "network"), "network")
    _reject_unknown(config, {"checkpoints", "resolution", "iterations", "warmup", "train_batch", "out"})
    paths = config.get("checkpoints") or []
    models = [_checkpoint_file(p) for p in paths] or [DepthNet(kind, network) for kind in ModelKind]
    result = benchmark(models, _resolution(config.get("resolution", "96x320")), int(config.get("iterations", 50)),
                       int(config.get("warmup", 5)), int(config.get("train_batch", 0)))
    _emit(result, config.get("out"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = _resolve(args, {"seeds": "seeds", "cases": "cases", "eps": "eps", "tol": "tol", "out": "out"})
    _reject_unknown(config, {"seeds", "cases", "eps", "tol", "out"})
    seeds = int(config.get("seeds", 5))
    if seeds < 1:
        raise ConfigError("seeds must be >= 1")
    names = config.get("cases") or list(CASES)
    unknown = sorted(set(names) - set(CASES))
    if unknown:
        raise ConfigError(f"unknown gradcheck cases {unknown}; choose from {sorted(CASES)}")
    results = run_gradcheck(range(seeds), names, float(config.get("eps", 1e-3)), float(config.get("tol", 1e-3)))
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:28s} seed={r.seed} rel_err={r.max_rel_error:.2e}")
    if config.get("out"):
        write_json(config["out"], {"results": [r.__dict__ for r in results], "failed": len(failed)})
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


# -- parser ------------------------------------------------------------------------

def _add_common(p) -> None:
    p.add_argument("--config", help="JSON file of settings; flags override it")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one setting, e.g. train.lr0=3e-4 or network.fusion_channels=16")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("generate-data", help="render a synthetic dataset")
    _add_common(p)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--n-frames", type=int)
    p.add_argument("--gt-top-mask", type=float, help="fraction of top rows removed from gt")
    p.add_argument("--num-lines", type=int, help="scan lines of the sparse pattern")
    p.set_defaults(func=cmd_generate_data, print_usage=p.print_usage)

    p = sub.add_parser("train", help="train a depth network")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--model", choices=[k.value for k in ModelKind])
    p.add_argument("--regime", choices=["synthetic", "supervised", "self_supervised", "semi_supervised"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-half-life", type=float, help="epochs per halving of the learning rate")
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--flip-prob", type=float)
    p.add_argument("--crop", help="HxW random crop, both divisible by 32")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--keep-last", type=int)
    p.add_argument("--init", help="depth checkpoint to start from")
    p.add_argument("--resume", action="store_const", const=True)
    p.add_argument("--adapt-data", help="real-domain dataset; trains synthetic first, then adapts")
    p.add_argument("--adapt-regime", choices=["supervised", "self_supervised", "semi_supervised"])
    p.set_defaults(func=cmd_train, print_usage=p.print_usage)

    p = sub.add_parser("eval", help="metrics, region rows and images for a checkpoint")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--gt-key", choices=["gt", "gt_full"])
    p.add_argument("--oracle", action="store_const", const=True, help="use the reference as the prediction")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--no-images", action="store_const", const=True)
    p.set_defaults(func=cmd_eval, print_usage=p.print_usage)

    p = sub.add_parser("infer", help="run one checkpoint on one sample directory")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--sample", help="directory with sparse.pgm (and seg.pgm)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer, print_usage=p.print_usage)

    p = sub.add_parser("benchmark", help="forward-time and parameter-count comparison")
    _add_common(p)
    p.add_argument("--checkpoint", action="append", help="repeat for several models; default: fresh models")
    p.add_argument("--resolution")
    p.add_argument("--iterations", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--train-batch", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark, print_usage=p.print_usage)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    _add_common(p)
    p.add_argument("--seeds", type=int)
    p.add_argument("--cases", nargs="+")
    p.add_argument("--eps", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck, print_usage=p.print_usage)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        return args.func(args)
    except UsageError as exc:
        args.print_usage(sys.stderr)
        print(f"depthlab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, TrainConfigError, ConfigMismatchError) as exc:
        print(f"depthlab {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetFormatError, EmptySupportError, FileNotFoundError) as exc:
        print(f"depthlab {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
