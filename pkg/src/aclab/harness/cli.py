"""Command-line entry point: ``aclab <solve|spectrum|varifold|limit|run|verify>``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from ..errors import ConfigError
from .acceptance import LEVELS, verify_suite
from .config import load_config
from .pipeline import run_experiment
from .plots import emit_plot_data

THREADS_ENV = "AC_SPECTRA_THREADS"
STAGE_OF = {"solve": "solve", "spectrum": "spectra", "varifold": "varifold", "limit": "limit", "run": "limit"}


def _threads(value: int | None) -> int | None:
    if value is not None:
        return value
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        return n
    return None


def _u64(text: str) -> int:
    n = int(text)
    if not 0 <= n < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, help="output directory (default: from the config)")
    common.add_argument("--seed", type=_u64, help="override the config seed")
    common.add_argument("--threads", type=int, help=f"BLAS threads (fallback: ${THREADS_ENV})")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="aclab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "solve": "converge the critical points along the eps schedule",
        "spectrum": "low spectra per region (reuses saved fields)",
        "varifold": "diffuse-varifold diagnostics (reuses saved fields)",
        "limit": "limit interface, Jacobi spectra and verdicts (reuses saved fields)",
        "run": "full pipeline plus plot data",
    }
    for name, text in helps.items():
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--config", type=Path, required=True, help="experiment TOML file")
    v = sub.add_parser("verify", parents=[common], help="acceptance suite")
    v.add_argument("--level", choices=LEVELS, default="quick")
    v.add_argument("--only", nargs="*", help="criterion ids to run, e.g. AC-1 AC-7")
    return p


def _experiment(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = Path(args.out or cfg.output)
    rep = run_experiment(cfg, out, until=STAGE_OF[args.command], reuse_fields=args.command not in ("solve", "run"))
    if args.command == "run" and rep.status == "OK":
        emit_plot_data(rep, out / "plots")
    summary = {"status": rep.status, "failed_stage": rep.failed_stage, "error": rep.error,
               "output": str(out), "verdicts": rep.verdicts}
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return 0 if rep.status == "OK" else 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        n = _threads(args.threads)
        with threadpool_limits(limits=n):
            if args.command == "verify":
                status, results = verify_suite(args.level, args.out, args.seed or 0, args.only)
                if args.out:
                    Path(args.out).mkdir(parents=True, exist_ok=True)
                    (Path(args.out) / "acceptance.json").write_text(json.dumps(
                        [c.to_dict() for c in results], indent=2, sort_keys=True, default=str))
                return status
            return _experiment(args)
    except ConfigError as exc:
        print(f"aclab: configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
