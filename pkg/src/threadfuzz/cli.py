"""Command-line front end: analyze, fuzz, replay, bench and report.

Every option with a ``THREADFUZZ_<NAME>`` environment variable listed in
``ENV_OPTIONS`` takes its default from that variable. Exit codes: 0 on
success, 1 on an input or analysis error, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .analysis import InstrMode, UnbalancedLocks, analysis_report
from .bench import FAMILY, MODES, aggregate_dir, format_table, list_cases, load_case, run_bench
from .corpus import dumps, load_queue, load_seed_inputs, validate_report, write_campaign, write_json
from .fuzzer import FuzzConfig, fuzz_campaign
from .mtir import MtirError, load_program
from .replay import CorpusSeed, Pattern, replay

ENV_PREFIX = "THREADFUZZ_"
ENV_OPTIONS = ("master_seed", "out", "budget_execs", "max_steps", "runs")


class CliError(Exception):
    """An error reported to the user with exit code 1."""


def _env_default(dest: str, fallback=None, cast=str):
    raw = os.environ.get(ENV_PREFIX + dest.upper())
    if raw is None:
        return fallback
    try:
        return cast(raw)
    except ValueError:
        raise SystemExit(f"threadfuzz: error: bad value for {ENV_PREFIX}{dest.upper()}: {raw!r}")


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--master-seed", type=int, default=argparse.SUPPRESS, help="master RNG seed")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output file or directory")
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="print JSON to stdout")

    ap = argparse.ArgumentParser(prog="threadfuzz", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"threadfuzz {__version__}")
    ap.add_argument("--master-seed", type=int, default=_env_default("master_seed", 0, int))
    ap.add_argument("--out", type=Path, default=_env_default("out", None, Path))
    ap.add_argument("--json", action="store_true", default=False)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="static analysis and instrumentation plan")
    p.add_argument("--program", type=Path, required=True)
    p.add_argument("--mode", choices=[m.value for m in InstrMode], default="muzz")
    p.add_argument("--p-s0", type=float, default=0.5)
    p.add_argument("--p-m0", type=float, default=0.33)

    p = sub.add_parser("fuzz", parents=[common], help="run one fuzzing campaign")
    p.add_argument("--program", type=Path, required=True)
    p.add_argument("--mode", choices=list(MODES), default="muzz")
    p.add_argument("--seeds", type=Path, nargs="*", default=[], help="seed files or directories")
    p.add_argument("--budget-execs", type=_non_negative, default=_env_default("budget_execs", 10_000, int))
    p.add_argument("--budget-seconds", type=float, default=None)
    p.add_argument("--max-steps", type=_positive, default=_env_default("max_steps", 20_000, int))
    p.add_argument("--stop-on-tag", default=None, help="stop at the first crash with this tag")
    p.add_argument("--resume", action="store_true", help="continue from the corpus already in --out")

    p = sub.add_parser("replay", parents=[common], help="replay a corpus under the bug detectors")
    p.add_argument("--corpus", type=Path, required=True, help="campaign directory")
    p.add_argument("--program", type=Path, default=None, help="defaults to <corpus>/program.mtir")
    p.add_argument("--pattern", choices=[x.value for x in Pattern], default="p2")
    p.add_argument("--budget-execs", type=_non_negative, default=_env_default("budget_execs", 1_000, int))
    p.add_argument("--max-steps", type=_positive, default=_env_default("max_steps", 20_000, int))
    p.add_argument("--all-seeds", action="store_true", help="also replay seeds without an mt context")
    p.add_argument("--no-intervention", action="store_true")

    p = sub.add_parser("bench", parents=[common], help="compare fuzzing modes on a benchmark case")
    p.add_argument("--case", choices=list_cases(), action="append", default=None,
                   help="repeatable; defaults to the five-program family")
    p.add_argument("--runs", type=_positive, default=_env_default("runs", 5, int))
    p.add_argument("--modes", default=",".join(MODES), help="comma-separated subset of muzz,mafl,afl")
    p.add_argument("--budget-execs", type=_positive, default=_env_default("budget_execs", None, int))
    p.add_argument("--replay-budget", type=_non_negative, default=None)

    p = sub.add_parser("report", parents=[common], help="summarise a campaign, replay or bench output")
    p.add_argument("path", type=Path, help="campaign dir, bench dir or report JSON")
    return ap


def _emit(args, doc: dict, text: str) -> None:
    print(dumps(doc) if args.json else text, end="" if args.json else "\n")


def _load(path: Path):
    if not path.exists():
        raise CliError(f"{path}: no such file")
    try:
        return load_program(path)
    except MtirError as e:
        raise CliError(f"{path}: {e}") from e


def cmd_analyze(args) -> int:
    program = _load(args.program)
    try:
        doc = analysis_report(program, args.mode, args.master_seed, p_s0=args.p_s0, p_m0=args.p_m0)
    except UnbalancedLocks as e:
        raise CliError(f"{args.program}: {e}") from e
    validate_report(doc, "analysis_report")
    if args.out:
        write_json(args.out, doc)
    text = "\n".join([
        f"{args.program}: {doc['n_blocks']} blocks, {doc['n_instructions']} instructions",
        f"suspicious scope ({len(doc['suspicious_scope'])}): {' '.join(doc['suspicious_scope'])}",
        f"deputies: {doc['n_deputies']} (inflation {doc['deputy_inflation']:+.1%})",
    ])
    _emit(args, doc, text)
    return 0


def cmd_fuzz(args) -> int:
    program = _load(args.program)
    if args.out is None:
        raise CliError("fuzz needs --out DIR")
    seeds = load_seed_inputs(args.seeds)
    ids, first_id = None, 0
    if args.resume:
        stored = load_queue(args.out)
        if not stored:
            raise CliError(f"{args.out}: nothing to resume")
        seeds = [s.data for s in stored] + seeds
        first_id = max(s.id for s in stored) + 1
        ids = [s.id for s in stored] + list(range(first_id, first_id + len(seeds) - len(stored)))
        first_id += len(seeds) - len(stored)
    if not seeds:
        raise CliError("no seeds given (use --seeds FILE|DIR)")
    cfg = FuzzConfig(mode=args.mode, master_seed=args.master_seed, budget_execs=args.budget_execs,
                     budget_seconds=args.budget_seconds, max_steps=args.max_steps, stop_on_tag=args.stop_on_tag)
    try:
        report = fuzz_campaign(program, cfg, seeds, first_id, ids)
    except UnbalancedLocks as e:
        raise CliError(f"{args.program}: {e}") from e
    write_campaign(args.out, report, args.program.read_text())
    doc = report.to_dict()
    text = (f"{args.mode}: {report.executions} execs, {report.n_all} seeds, {report.n_mt} mt "
            f"({report.mt_ratio:.1%}), crashes {report.n_crash} (mt {report.n_crash_mt}); wrote {args.out}")
    _emit(args, doc, text)
    return 0


def cmd_replay(args) -> int:
    program = _load(args.program or args.corpus / "program.mtir")
    try:
        stored = load_queue(args.corpus)
    except FileNotFoundError as e:
        raise CliError(str(e)) from e
    corpus = [CorpusSeed(s.id, s.data, s.meta.get("c_m", 0), s.meta.get("n_c"))
              for s in stored if args.all_seeds or s.meta.get("is_mt", True)]
    rep = replay(program, corpus, args.pattern, args.budget_execs, master_seed=args.master_seed,
                 intervention=not args.no_intervention, max_steps=args.max_steps)
    doc = rep.to_dict()
    validate_report(doc, "replay_report")
    if args.out:
        write_json(args.out, doc)
    lines = [f"pattern {doc['pattern']}: {doc['executions']} execs over {len(corpus)} seeds, {doc['n_bugs']} bugs"]
    lines += [f"  {b['kind']:<22}{b['first_exposure']:>8}  {' '.join(b['sites'])} {b['var']}" for b in doc["bugs"]]
    _emit(args, doc, "\n".join(lines))
    return 0


def cmd_bench(args) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise CliError(f"unknown mode(s) {bad or modes}; choose from {','.join(MODES)}")
    tables = []
    for name in args.case or list(FAMILY):
        case = load_case(name)
        out = args.out / name if args.out else None
        log = None if args.json else (lambda msg: print(msg, file=sys.stderr))
        tables.append(run_bench(case, modes, args.runs, args.budget_execs, args.replay_budget,
                                args.master_seed, out, log))
    doc = {"tables": tables}
    _emit(args, doc, "\n\n".join(format_table(t) for t in tables))
    return 0 if all(c["passed"] for t in tables for c in t["checks"]) else 1


def cmd_report(args) -> int:
    path = args.path
    if path.is_dir() and (path / "bench.json").exists():
        table = aggregate_dir(path)
        _emit(args, table, format_table(table))
        return 0
    if path.is_dir():
        if (path / "campaign.json").exists():
            path = path / "campaign.json"
        elif any(path.glob("*/bench.json")):
            tables = [aggregate_dir(d) for d in sorted(path.iterdir()) if (d / "bench.json").exists()]
            _emit(args, {"tables": tables}, "\n\n".join(format_table(t) for t in tables))
            return 0
    if not path.is_file():
        raise CliError(f"{args.path}: not a campaign, replay or bench output")
    doc = json.loads(path.read_text())
    if "queue" in doc:
        validate_report(doc, "campaign")
        c = doc["config"]
        text = "\n".join([
            f"mode {c['mode']}  master seed {c['master_seed']}  executions {doc['executions']}",
            f"N_all {doc['n_all']}  N_mt {doc['n_mt']}  N_mt/N_all {doc['mt_ratio']:.3f}",
            f"N_c {doc['n_crash']}  N_c^m {doc['n_crash_mt']}  N_c^s {doc['n_crash_st']}",
            f"V_m {len(doc['vulnerabilities_mt'])}  V_s {len(doc['vulnerabilities_st'])}",
        ] + [f"  {x['key_id']} {x['tag']:<20} mt={x['is_mt']} first at {x['found_at']}  {' < '.join(x['frames'])}"
             for x in doc["crashes"]])
    elif "pattern" in doc:
        validate_report(doc, "replay_report")
        text = "\n".join([f"pattern {doc['pattern']}  executions {doc['executions']}  bugs {doc['n_bugs']}"] +
                         [f"  {b['kind']:<22}{b['first_exposure']:>8}  {' '.join(b['sites'])} {b['var']}"
                          for b in doc["bugs"]])
    elif "rows" in doc:
        validate_report(doc, "bench_table")
        text = format_table(doc)
    else:
        raise CliError(f"{path}: unrecognised report")
    _emit(args, doc, text)
    return 0


COMMANDS = {"analyze": cmd_analyze, "fuzz": cmd_fuzz, "replay": cmd_replay, "bench": cmd_bench,
            "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as e:
        print(f"threadfuzz: error: {e}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as e:
        print(f"threadfuzz: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
