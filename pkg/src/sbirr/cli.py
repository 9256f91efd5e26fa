"""Command line entry point: ``sbirr generate | run | report``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .errors import InvalidParameterError, ProtocolError, SBIRRError, SchemaError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbirr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a synthetic benchmark dataset")
    g.add_argument("--config", required=True, help="generator spec JSON")
    g.add_argument("--seed", type=int, help="override the spec seed")
    g.add_argument("--out", required=True, help="output directory (or .json bundle)")

    r = sub.add_parser("run", help="train and evaluate on every seed")
    r.add_argument("--config", required=True, help="experiment config JSON")
    r.add_argument("--seed", type=int, help="run this single seed only")
    r.add_argument("--out", help="results directory (default: config 'out')")
    r.add_argument("--threads", type=int, default=1, help="seeds run in parallel worker processes")

    s = sub.add_parser("report", help="aggregate a results directory")
    s.add_argument("results", nargs="?", help="results directory")
    s.add_argument("--out", help="results directory (alternative to the positional)")
    return p


def _generate(args):
    from .datagen import GeneratorSpec, generate, save_bundle, save_dataset

    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{args.config}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise SchemaError("generator spec must be a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = GeneratorSpec.from_dict(raw)
    data, _ = generate(spec)
    if args.out.endswith(".json"):
        save_bundle(data, args.out)
    else:
        save_dataset(data, args.out)
    print(f"wrote {len(data)} snapshots ({sum(data.counts)} points) to {args.out}")


def _run(args):
    from .experiment import load_config, run_experiment

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    out = args.out or cfg.out
    rows = run_experiment(cfg, out, workers=max(1, args.threads))
    print(f"wrote {len(rows)} metric rows to {os.path.join(out, 'metrics.csv')}")


def _report(args):
    from .experiment import report

    target = args.results or args.out
    if not target:
        raise SchemaError("report needs a results directory")
    summary = report(target)
    print(f"{'method':8s} {'anchors':9s} {'time':>6s} {'EMD':>17s} {'MMD^2':>17s}")
    for rec in summary:
        print(
            f"{rec['method']:8s} {rec['anchor_mode']:9s} {rec['val_time']:6.2f} "
            f"{rec['emd_mean']:8.4f} ± {rec['emd_std']:6.4f} {rec['mmd_sq_mean']:8.4f} ± {rec['mmd_sq_std']:6.4f}"
        )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    handler = {"generate": _generate, "run": _run, "report": _report}[args.command]
    try:
        handler(args)
    except (SchemaError, ProtocolError, InvalidParameterError, OSError) as exc:
        print(f"error: {_context(exc)}{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SBIRRError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {_context(exc)}{exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _context(exc):
    parts = [f"{k}={getattr(exc, k)}" for k in ("seed", "stage", "time_index") if hasattr(exc, k)]
    return f"[{', '.join(parts)}] " if parts else ""


if __name__ == "__main__":
    sys.exit(main())
