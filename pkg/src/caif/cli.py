"""Command line entry point: ``caif {generate,sweep,entropy-profile,bench}``.

Every run reads a JSON config (``--config``); flags named after config fields
override the file. Exit codes: 0 success, 2 config/validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import runs

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _path(text: str) -> str:
    return str(Path(text).resolve())


def _csv_list(cast):
    def parse(text: str):
        return [cast(x) for x in text.split(",") if x.strip()]
    return parse


# config field -> argument type; flags use the field name verbatim
OVERRIDES = {
    "alpha": float,
    "top_j": int,
    "top_k": int,
    "mode": str,
    "criterion": str,
    "temperature": float,
    "max_new_tokens": int,
    "include_prompt_in_classifier_input": _bool,
    "prob_clamp_epsilon": float,
    "prompts": _path,
    "max_prompts": int,
    "samples_per_prompt": int,
    "workers": int,
    "attribute_scope": str,
    "attribute_threshold": float,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caif", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run config")
    common.add_argument("--out", type=_path, help="output path (overrides the command's 'output')")
    common.add_argument("--seed", type=int, help="base seed (overrides 'base_seed')")
    common.add_argument("--emit-traces", action="store_true", help="include per-step traces in JSONL")
    for name, kind in OVERRIDES.items():
        common.add_argument(f"--{name}", type=kind, default=None)

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="sample continuations and report metrics")
    sweep = sub.add_parser("sweep", parents=[common], help="grid over alpha / mode / criterion")
    sweep.add_argument("--sweep_alpha", type=_csv_list(float))
    sweep.add_argument("--sweep_mode", type=_csv_list(str))
    sweep.add_argument(
        "--sweep_criterion",
        type=_csv_list(str),
        help="comma list, e.g. always,periodic:2,entropy:3.2,entropy-fraction:0.5",
    )
    sub.add_parser("entropy-profile", parents=[common], help="entropy CDF of an unguided run")
    bench = sub.add_parser("bench", parents=[common], help="wall-clock timing per sequence length")
    bench.add_argument("--lengths", type=_csv_list(int))
    bench.add_argument("--repeats", type=int)
    return parser


def merged_config(args: argparse.Namespace) -> tuple[dict, Path]:
    raw, base = runs.read_config(args.config)
    for name in OVERRIDES:
        value = getattr(args, name)
        if value is not None:
            raw[name] = value
    if args.out is not None:
        section = runs.SECTIONS[args.command]
        if section is None:
            raw["output"] = args.out
        else:
            raw[section] = {**(raw.get(section) or {}), "output": args.out}
    if args.seed is not None:
        raw["base_seed"] = args.seed
    if args.emit_traces:
        raw["emit_traces"] = True
    if args.command == "sweep":
        grid = dict(raw.get("sweep") or {})
        for key in ("alpha", "mode", "criterion"):
            value = getattr(args, f"sweep_{key}")
            if value is not None:
                grid[key] = value
        raw["sweep"] = grid
    if args.command == "bench":
        bench = dict(raw.get("bench") or {})
        if args.lengths is not None:
            bench["lengths"] = args.lengths
        if args.repeats is not None:
            bench["repeats"] = args.repeats
        raw["bench"] = bench
    return raw, base


def run(args: argparse.Namespace) -> int:
    raw, base = merged_config(args)
    ctx = runs.load_context(raw, base, args.command)
    label = ctx.target.class_label
    if args.command == "generate":
        result, report = runs.run_generate(ctx)
        print(report.render_table("CAIF", label))
        if ctx.output is None:
            print(json.dumps(report.to_dict(), indent=2))
    elif args.command == "sweep":
        rows = runs.run_sweep(ctx)
        if ctx.output is None:
            sys.stdout.write(runs.csv_text(runs.SWEEP_COLUMNS, rows))
    elif args.command == "entropy-profile":
        profile, table = runs.run_entropy_profile(ctx)
        print(f"{profile.samples.size} entropy samples")
        for fraction, threshold in table:
            print(f"{fraction:5.2f}  {threshold:.4f}")
    elif args.command == "bench":
        rows = runs.run_bench(ctx)
        if ctx.output is None:
            sys.stdout.write(runs.csv_text(runs.BENCH_COLUMNS, rows))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except runs.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except runs.RunError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
