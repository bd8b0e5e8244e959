"""Command-line entry point: ``dlclab <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit status: 0 success, 1 invalid input (config, flags, files), 2 failure
during training or sampling.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .checkpoint import CheckpointError, atomic_write
from .config import ConfigError, RunConfig
from .nn import NumericError, ShapeError

log = logging.getLogger("dlclab")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _mode(text: str) -> tuple[int, int]:
    try:
        r, c = (int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'row,col', got {text!r}") from None
    return r, c


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dlclab", description="Discrete latent code experiments on grid mixtures.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "reproduce-toy": "KL vs number of modes for unconditional, oracle and GMM conditioning",
        "train-encoder": "fit the SEM encoder and write encoder.dlck",
        "tokenize": "encode a fresh data sample into codes.csv",
        "train-prior": "fit the masked discrete diffusion prior over codes",
        "train-cond": "fit the code-conditioned diffusion model",
        "pipeline": "train all stages, sample code then point, compare with unconditional",
        "compose": "mix the codes of two parent modes and decode",
        "eval": "score a CSV of x0,x1 samples against the configured grid",
        "remask-sweep": "sample codes across remasking ratios and score them",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", type=Path, help="key = value config file")
        sp.add_argument("--seed", type=_u64, help="overrides the config seed")
        sp.add_argument("--out", type=Path, help="output directory (overrides config)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a single config key; repeatable")
        if name == "pipeline":
            sp.add_argument("--reuse", action="store_true",
                            help="load stage checkpoints from --out instead of training")
        if name == "compose":
            sp.add_argument("--mode-a", type=_mode, metavar="ROW,COL")
            sp.add_argument("--mode-b", type=_mode, metavar="ROW,COL")
        if name == "eval":
            sp.add_argument("--samples", type=Path, required=True, help="CSV with x0,x1 columns")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value.strip(), where="--set")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = str(args.out)
    cfg.validate()
    return cfg


def dispatch(args, run: ex.Run) -> int:
    cmd = args.command
    if cmd == "reproduce-toy":
        return ex.reproduce_toy(run)
    if cmd == "train-encoder":
        ex.cmd_train_encoder(run)
    elif cmd == "tokenize":
        ex.cmd_tokenize(run)
    elif cmd == "train-prior":
        ex.cmd_train_prior(run)
    elif cmd == "train-cond":
        ex.cmd_train_cond(run)
    elif cmd == "pipeline":
        ex.cmd_pipeline(run, reuse=args.reuse)
    elif cmd == "compose":
        ex.cmd_compose(run, args.mode_a, args.mode_b)
    elif cmd == "eval":
        ex.cmd_eval(run, args.samples)
    elif cmd == "remask-sweep":
        ex.cmd_remask_sweep(run)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = resolve_config(args)
        ex.worker_count()
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / f"{args.command}.config.txt", cfg.to_text())
        return dispatch(args, ex.Run(cfg, out))
    except (ConfigError, CheckpointError, FileNotFoundError, ShapeError) as e:
        print(f"dlclab: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except NumericError as e:
        print(f"dlclab: training failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:  # anything else is a runtime failure, not bad input
        log.exception("unexpected failure")
        print(f"dlclab: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
