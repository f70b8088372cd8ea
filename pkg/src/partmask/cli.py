"""Command-line entry points.

Subcommands: gen-data, train-parts, pretrain, export-plans, report. Every
run writes a `config.resolved` key=value file capturing all effective
parameters; re-running with that file reproduces its outputs byte for byte.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .datasets import DATASET_KINDS, gen_dataset
from .errors import ConfigError, DataError, NumericError, PartmaskError
from .training import PRETRAIN_STRATEGIES, export_plans, report_metrics, run_partlearn, run_pretrain


@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    dataset: str = ""
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    n_parts: int = 6
    mask_ratio: float = 0.75
    gamma: float = 2.0
    lam: float = 0.03            # diversity loss weight
    blur_kernel: int = 7
    epochs: int = 50
    warmup_epochs: int = -1      # -1: 5% of epochs
    peak_lr: float = 2.4e-3
    weight_decay: float = 0.05
    batch_size: int = 8
    reverse_schedule: bool = False
    keep_fraction: float = 0.25
    out: str = "runs/out"
    enc_width: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_width: int = 32
    dec_depth: int = 2
    dec_heads: int = 2
    encoder_warm_epochs: int = -1  # -1: 20% of epochs; part phase only
    encoder_positions: bool = False  # positional encodings in the part-phase encoder
    kind: str = "two-blobs"
    count: int = 64
    k: int = 4
    strategy: str = "semantic"
    segmentation: str = ""
    plan_epochs: str = ""

    def resolved(self) -> "RunConfig":
        cfg = replace(self)
        if cfg.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {cfg.epochs}")
        if cfg.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {cfg.batch_size}")
        if cfg.warmup_epochs < 0:
            cfg.warmup_epochs = max(1, round(0.05 * cfg.epochs))
        if cfg.encoder_warm_epochs < 0:
            cfg.encoder_warm_epochs = max(1, cfg.epochs // 5)
        return cfg


_BOOL_FIELDS = {f.name for f in fields(RunConfig) if f.type == "bool"}


def _parse_value(name: str, text: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if name not in kinds:
        raise ConfigError(f"unknown config key '{name}'")
    kind = kinds[name]
    text = text.strip()
    try:
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value '{text}' for config key '{name}'") from None


def read_config_file(base: RunConfig, path) -> RunConfig:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    updates = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
        key, value = line.split("=", 1)
        key = key.strip()
        updates[key] = _parse_value(key, value)
    return replace(base, **updates)


def write_resolved(cfg: RunConfig, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name}={value}")
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n")


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", metavar="PATH", help="key=value config file; flags override it")
    for f in fields(RunConfig):
        if f.name == "command":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name in _BOOL_FIELDS:
            parser.add_argument(flag, choices=["true", "false"], default=None)
        else:
            parser.add_argument(flag, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partmask", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("gen-data", f"generate a synthetic dataset ({', '.join(DATASET_KINDS)}) plus label sidecar"),
        ("train-parts", "train part attention and the reconstruction decoder"),
        ("pretrain", f"masked pretraining; strategies: {', '.join(PRETRAIN_STRATEGIES)}"),
        ("export-plans", "emit mask plans for chosen epochs without training"),
    ):
        _add_config_flags(sub.add_parser(name, help=help_text))
    report = sub.add_parser("report", help="summarize a metrics CSV")
    report.add_argument("metrics", help="path to a metrics.csv")
    return parser


def config_from_args(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = read_config_file(cfg, args.config)
    for f in fields(RunConfig):
        if f.name == "command":
            continue
        raw = getattr(args, f.name, None)
        if raw is not None:
            setattr(cfg, f.name, _parse_value(f.name, str(raw)))
    cfg.command = args.command
    return cfg.resolved()


def _cmd_gen_data(cfg: RunConfig):
    out_dir = Path(cfg.out)
    name = cfg.kind.replace("-", "_") + ".sten"
    data_path, label_path = gen_dataset(cfg.kind, cfg.count, cfg.image_size, cfg.image_size,
                                        cfg.seed, out_dir / name, k=cfg.k)
    write_resolved(cfg, out_dir)
    print(f"wrote {data_path} and {label_path}")


def _cmd_train_parts(cfg: RunConfig):
    result = run_partlearn(cfg)
    write_resolved(cfg, result["out"])
    final = result["metrics"][-1]
    print(f"trained {cfg.epochs} epochs; final recon_loss={final[1]:.6g} fg_iou={final[4]:.6g}")
    print(f"outputs in {result['out']}")


def _cmd_pretrain(cfg: RunConfig):
    result = run_pretrain(cfg)
    write_resolved(cfg, result["out"])
    final = result["metrics"][-1]
    print(f"pretrained {cfg.epochs} epochs; final mim_loss={final[2]:.6g} alpha={final[1]:.6g}")
    print(f"outputs in {result['out']}")


def _cmd_export_plans(cfg: RunConfig):
    result = export_plans(cfg)
    write_resolved(cfg, result["out"])
    print(f"wrote {len(result['rows'])} plan rows to {result['out'] / 'plans.csv'}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            print(report_metrics(args.metrics))
            return 0
        cfg = config_from_args(args)
        handler = {
            "gen-data": _cmd_gen_data,
            "train-parts": _cmd_train_parts,
            "pretrain": _cmd_pretrain,
            "export-plans": _cmd_export_plans,
        }[args.command]
        handler(cfg)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, PartmaskError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 4


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
