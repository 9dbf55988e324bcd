"""Command-line interface: train, eval, infer, bench, flops, and score.

Configuration precedence is defaults < config file < command-line flags. A
config file is flat ``key = value`` text whose keys mirror the model and
training config field names ('#' starts a comment). Every run first echoes
its fully resolved configuration in the same format.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import PairDataset, dataset_scan, png_read, png_write
from .errors import (AsConvSRError, CheckpointError, ConfigError, DataError,
                     NumericError)
from .metrics import bicubic_resize, efficiency_score, psnr_rgb, runtime_bench, ssim_rgb
from .model import PRESETS, ModelConfig, build_model, flops_estimate
from .tensor import Rng
from .training import TrainConfig, Trainer, checkpoint_load, checkpoint_save

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we own the exit codes
        raise _UsageError(message)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _field_type(field):
    # dataclass annotations are strings under `from __future__ import annotations`
    name = field.type if isinstance(field.type, str) else field.type.__name__
    return {"int": int, "float": float, "str": str, "bool": _parse_bool}[name]


def _add_config_flags(parser, config_cls, group_name):
    group = parser.add_argument_group(f"{group_name} fields")
    for f in dataclasses.fields(config_cls):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                           type=_field_type(f), default=None,
                           help=f"{group_name}.{f.name}")


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; values keep their
    raw string form until matched against a config field."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(field, raw: str):
    try:
        return _field_type(field)(raw)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise ConfigError(f"config key {field.name!r}: {exc}") from exc


def resolve_configs(args, file_values: dict | None):
    """defaults < config file < flags, for both config dataclasses."""
    model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    model_kw, train_kw = {}, {}
    for key, raw in (file_values or {}).items():
        if key in model_fields:
            model_kw[key] = _coerce(model_fields[key], raw)
        elif key in train_fields:
            train_kw[key] = _coerce(train_fields[key], raw)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for name in model_fields:
        v = getattr(args, name, None)
        if v is not None:
            model_kw[name] = v
    for name in train_fields:
        v = getattr(args, name, None)
        if v is not None:
            train_kw[name] = v
    model_cfg = ModelConfig(**model_kw)
    model_cfg.validate()
    train_cfg = TrainConfig(**train_kw)
    return model_cfg, train_cfg


def _echo_config(title: str, pairs: dict) -> None:
    print(f"# resolved {title}")
    for key, value in pairs.items():
        print(f"{key} = {value}")


def _model_from_args(args) -> AsConvSR:
    if getattr(args, "ckpt", None):
        ckpt = checkpoint_load(args.ckpt)
        return ckpt.build_model()
    preset = getattr(args, "preset", None)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = PRESETS[preset]()
        return build_model(cfg, Rng(getattr(args, "seed", 0) or 0))
    raise ConfigError("provide --ckpt or --preset")


# ---------------------------------------------------------------------------
# commands


def cmd_score(args) -> int:
    _echo_config("score inputs", {"psnr": args.psnr, "bicubic": args.bicubic,
                                  "runtime_ms": args.runtime_ms, "constant": args.constant})
    value = efficiency_score(args.psnr, args.bicubic, args.runtime_ms, args.constant)
    print(f"score = {value:.4f}")
    return EXIT_OK


def cmd_flops(args) -> int:
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        cfg = PRESETS[args.preset]()
        for f in dataclasses.fields(ModelConfig):  # flags still override a preset
            v = getattr(args, f.name, None)
            if v is not None:
                setattr(cfg, f.name, v)
        cfg.validate()
    else:
        file_values = parse_config_file(args.config) if args.config else None
        cfg, _ = resolve_configs(args, file_values)
    _echo_config("model config", cfg.to_dict())
    report = flops_estimate(cfg, args.height, args.width)
    print(report.to_text())
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _model_from_args(args)
    _echo_config("model config", model.config.to_dict())
    _echo_config("bench inputs", {"width": args.width, "height": args.height,
                                  "warmup": args.warmup, "reps": args.reps,
                                  "batch": args.batch, "threads": args.threads,
                                  "seed": args.seed})
    report = runtime_bench(model, args.height, args.width, warmup=args.warmup,
                           reps=args.reps, seed=args.seed, batch=args.batch,
                           model_id=args.preset or str(args.ckpt), threads=args.threads)
    print(report.to_json())
    if args.csv:
        print(report.csv_header())
        print(report.to_csv_row())
    return EXIT_OK


def cmd_infer(args) -> int:
    from .errors import ShapeError

    ckpt = checkpoint_load(args.ckpt)
    model = ckpt.build_model()
    _echo_config("model config", model.config.to_dict())
    x = png_read(args.input)
    try:
        sr = model.forward(x, train=False)
    except ShapeError as exc:  # image incompatible with the model = bad data
        raise DataError(f"{args.input}: {exc}") from exc
    png_write(sr, args.output)
    print(f"wrote {args.output} ({sr.shape[3]}x{sr.shape[2]})")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = checkpoint_load(args.ckpt)
    model = ckpt.build_model()
    _echo_config("model config", model.config.to_dict())
    index = dataset_scan(args.data)
    data = PairDataset(index)
    per_image = []
    for i in range(len(data)):
        lr, hr = data[i]
        sr = model.forward(lr[None], train=False)[0]
        up = np.clip(bicubic_resize(lr, scale=2.0), 0.0, 1.0).astype(np.float32)
        per_image.append({
            "stem": index.entries[i].stem,
            "psnr": psnr_rgb(sr, hr),
            "ssim": ssim_rgb(sr, hr),
            "psnr_bicubic": psnr_rgb(up, hr),
        })
    mean_psnr = float(np.mean([r["psnr"] for r in per_image]))
    mean_ssim = float(np.mean([r["ssim"] for r in per_image]))
    mean_bicubic = float(np.mean([r["psnr_bicubic"] for r in per_image]))
    if args.runtime_ms is not None:
        runtime_ms, source = float(args.runtime_ms), "override"
    else:
        lw, lh = index.entries[0].lr_size
        bench = runtime_bench(model, lh, lw, warmup=args.warmup, reps=args.reps,
                              threads=args.threads)
        runtime_ms, source = bench.median_ms, "bench"
    report = {
        "dataset": str(args.data),
        "n_images": len(per_image),
        "psnr": mean_psnr,
        "ssim": mean_ssim,
        "psnr_bicubic": mean_bicubic,
        "runtime_ms": runtime_ms,
        "runtime_source": source,
        "score": efficiency_score(mean_psnr, mean_bicubic, runtime_ms),
        "per_image": per_image,
    }
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_train(args) -> int:
    file_values = parse_config_file(args.config) if args.config else None
    model_cfg, train_cfg = resolve_configs(args, file_values)
    train_cfg.validate(model_cfg.scale)
    _echo_config("model config", model_cfg.to_dict())
    _echo_config("train config", train_cfg.to_dict())
    index = dataset_scan(args.data)
    data = PairDataset(index)
    model = build_model(model_cfg, Rng(train_cfg.seed))
    for notice in model.init_notices:
        print(f"# init notice: {notice}")
    trainer = Trainer(model, data, train_cfg, log_path=args.log)
    try:
        records = trainer.run()
    finally:
        trainer.close()
    checkpoint_save(args.out, model, adam=trainer.adam, iteration=trainer.iteration,
                    rng=trainer.rng)
    last = records[-1] if records else None
    loss_txt = f", final loss {last.loss:.6g}" if last else ""
    print(f"# trained {trainer.iteration} iterations{loss_txt}; checkpoint -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> _Parser:
    parser = _Parser(prog="asconvsr",
                     description="Assembled-convolution super-resolution toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset root with HR/ (and optional LR/)")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="CSV training log path")
    _add_config_flags(p, ModelConfig, "model config")
    _add_config_flags(p, TrainConfig, "train config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM/score of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--runtime-ms", type=float, default=None,
                   help="use this runtime instead of running a fresh bench")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="upscale one PNG with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="latency benchmark")
    p.add_argument("--ckpt")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", action="store_true", help="also print a CSV row")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("flops", help="per-layer FLOPs/MACs estimate")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    _add_config_flags(p, ModelConfig, "model config")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("score", help="efficiency score from PSNRs and runtime")
    p.add_argument("--psnr", type=float, required=True)
    p.add_argument("--bicubic", type=float, required=True)
    p.add_argument("--runtime-ms", type=float, required=True)
    p.add_argument("--constant", type=float, default=0.1)
    p.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AsConvSRError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
