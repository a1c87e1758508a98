"""Command-line interface.

    sassl <synth|pretrain|finetune|probe|eval|report> --config PATH
          [--seed N] [--out DIR]

The output directory resolves as --out flag, then the SASSL_OUT
environment variable, then ./sassl_out. Exit codes: 0 success, 2 bad
configuration or usage, 3 missing or corrupt data artifacts, 4 numeric
failure during training or evaluation.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import commands
from .config import load_config
from .errors import ConfigError, DataError, NumericError

_COMMANDS = {
    "synth": commands.cmd_synth,
    "pretrain": commands.cmd_pretrain,
    "finetune": commands.cmd_finetune,
    "probe": commands.cmd_probe,
    "eval": commands.cmd_eval,
    "report": commands.cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sassl",
        description="Stain-adversarial self-supervised pretraining on synthetic patches.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None,
                       help="output directory (default: $SASSL_OUT or ./sassl_out)")
    return parser


def resolve_out(flag_value: str | None) -> Path:
    if flag_value:
        return Path(flag_value)
    env = os.environ.get("SASSL_OUT")
    if env:
        return Path(env)
    return Path("sassl_out")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError(f"--seed must be >= 0, got {args.seed}")
            cfg.seed = args.seed
        out = resolve_out(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        print(f"sassl: config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"sassl: data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"sassl: numeric error: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
