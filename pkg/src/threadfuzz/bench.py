"""Bundled benchmark cases with planted bugs, and the mode comparison table."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .analysis import analyze_program
from .corpus import strip_timing, validate_report, write_campaign, write_json
from .fuzzer import FuzzConfig, FuzzMode, fuzz_campaign
from .mtir import Program, parse_program
from .oracle import Enumerator, enumerate_interleavings
from .replay import CorpusSeed, Pattern, detect_violations, replay

FAMILY = ("fig1", "gate", "crash", "lockorder", "leak")
EXTRAS = ("race", "toy_race", "toy_locked", "toy_div")
MODES = ("muzz", "mafl", "afl")
RATIO_MARGIN = 0.05


@dataclass(frozen=True)
class PlantedCrash:
    tag: str
    witness: bytes
    concurrency_dependent: bool


@dataclass(frozen=True)
class PlantedViolation:
    kind: str
    sites: tuple[str, ...]
    var: str
    witness: bytes

    @property
    def key(self) -> tuple:
        return (self.kind, self.sites, self.var)


@dataclass
class BenchmarkCase:
    name: str
    program_file: str
    description: str = ""
    family: bool = False
    seeds: list[bytes] = field(default_factory=list)
    expected_scope: list[str] | None = None
    planted_crashes: list[PlantedCrash] = field(default_factory=list)
    planted_violations: list[PlantedViolation] = field(default_factory=list)
    budget_execs: int = 10_000
    replay_budget: int = 500
    max_steps: int = 20_000

    def program_text(self) -> str:
        return resources.files("threadfuzz").joinpath(f"data/programs/{self.program_file}").read_text()

    def program(self) -> Program:
        return parse_program(self.program_text())


def _case_from_dict(d: dict) -> BenchmarkCase:
    return BenchmarkCase(
        name=d["name"],
        program_file=d["program"],
        description=d.get("description", ""),
        family=d.get("family", False),
        seeds=[bytes.fromhex(h) for h in d.get("seeds_hex", [])],
        expected_scope=d.get("expected_scope"),
        planted_crashes=[PlantedCrash(c["tag"], bytes.fromhex(c["witness_hex"]), c["concurrency_dependent"])
                         for c in d.get("planted_crashes", [])],
        planted_violations=[PlantedViolation(v["kind"], tuple(v["sites"]), v["var"], bytes.fromhex(v["witness_hex"]))
                            for v in d.get("planted_violations", [])],
        budget_execs=d.get("budget_execs", 10_000),
        replay_budget=d.get("replay_budget", 500),
        max_steps=d.get("max_steps", 20_000),
    )


def load_case(name: str) -> BenchmarkCase:
    path = resources.files("threadfuzz").joinpath(f"data/programs/{name}.json")
    if not path.is_file():
        raise KeyError(f"unknown benchmark case {name!r}")
    return _case_from_dict(json.loads(path.read_text()))


def list_cases() -> list[str]:
    return list(FAMILY + EXTRAS)


# --------------------------------------------------------------------------
# ground truth

def scope_of(case: BenchmarkCase) -> list[str]:
    _, _, scope = analyze_program(case.program())
    return sorted(map(str, scope.instructions))


def oracle_crash_tags(program: Program, data: bytes, max_states: int = 300_000) -> tuple[set[str], bool]:
    """Crash tags reachable on ``data`` under some schedule, and whether any
    schedule avoids crashing (so the crash depends on the interleaving)."""
    res = enumerate_interleavings(program, data, max_states=max_states)
    tags = {o[1] for o in res.outcomes if o[0] == "crash"}
    return tags, any(o[0] != "crash" for o in res.outcomes)


def oracle_violation_keys(program: Program, data: bytes, max_paths: int = 200_000) -> set[tuple]:
    """Violation keys the detectors report over every schedule of ``data``."""
    en = Enumerator(program, data)
    keys = set()
    for events, end, state in en.traces(max_paths):
        blocked = en.blocked(state) if end[0] == "deadlock" else []
        for v in detect_violations(events, end[0], blocked):
            keys.add(v.key)
    return keys


# --------------------------------------------------------------------------
# mode comparison

def mt_corpus(campaign: dict) -> list[CorpusSeed]:
    """Multithreading-relevant queue seeds of a campaign report, for replay."""
    return [CorpusSeed(q["id"], bytes.fromhex(q["data_hex"]), q["c_m"], q["n_c"])
            for q in campaign["queue"] if q["is_mt"]]


def _median(xs):
    return statistics.median(xs) if xs else 0


def aggregate(case: str, budget_execs: int, replay_budget: int, modes: list[str],
              runs: list[tuple[str, int, dict, dict]]) -> dict:
    """Build the comparison table from raw (mode, run, campaign, replay) reports.

    Pure: the same inputs always give the same table.
    """
    rows = []
    for mode, run, camp, rep in sorted(runs, key=lambda r: (modes.index(r[0]), r[1])):
        rows.append({
            "mode": mode,
            "run": run,
            "master_seed": camp["config"]["master_seed"],
            "n_all": camp["n_all"],
            "n_mt": camp["n_mt"],
            "mt_ratio": camp["mt_ratio"],
            "n_crash_mt": camp["n_crash_mt"],
            "vulnerabilities_mt": len(camp["vulnerabilities_mt"]),
            "n_bugs_mt": rep["n_bugs"],
        })
    medians = {}
    for mode in modes:
        mine = [r for r in rows if r["mode"] == mode]
        medians[mode] = {k: _median([r[k] for r in mine])
                         for k in ("n_mt", "mt_ratio", "n_crash_mt", "vulnerabilities_mt", "n_bugs_mt")}
    checks = []
    ratio = {m: medians[m]["mt_ratio"] for m in modes}
    if "muzz" in ratio and "mafl" in ratio:
        checks.append({"name": "median N_mt/N_all: MUZZ >= MAFL", "passed": ratio["muzz"] >= ratio["mafl"]})
    if "mafl" in ratio and "afl" in ratio:
        checks.append({"name": "median N_mt/N_all: MAFL >= AFL", "passed": ratio["mafl"] >= ratio["afl"]})
    if "muzz" in ratio and "afl" in ratio:
        checks.append({"name": f"median N_mt/N_all: MUZZ - AFL >= {RATIO_MARGIN:.2f}",
                       "passed": ratio["muzz"] - ratio["afl"] >= RATIO_MARGIN - 1e-12})
    table = {
        "case": case,
        "budget_execs": budget_execs,
        "replay_budget": replay_budget,
        "modes": list(modes),
        "rows": rows,
        "medians": medians,
        "checks": checks,
    }
    validate_report(table, "bench_table")
    return table


def run_bench(case: BenchmarkCase, modes: list[str] = MODES, runs: int = 5, budget_execs: int | None = None,
              replay_budget: int | None = None, master_seed: int = 0, out: Path | None = None,
              log=None) -> dict:
    """Run ``runs`` campaigns per mode and replay their mt seeds (pattern P2).

    Run ``r`` of every mode uses master seed ``master_seed + r``. With ``out``
    each campaign and replay report is written under ``out/<mode>_<run>/``.
    """
    if runs < 1:
        raise ValueError("runs must be positive")
    budget = case.budget_execs if budget_execs is None else budget_execs
    rbudget = case.replay_budget if replay_budget is None else replay_budget
    program = case.program()
    raw = []
    for mode in modes:
        FuzzMode(mode)
        for r in range(runs):
            t0 = time.perf_counter()
            cfg = FuzzConfig(mode=mode, master_seed=master_seed + r, budget_execs=budget, max_steps=case.max_steps)
            report = fuzz_campaign(program, cfg, case.seeds)
            camp = report.to_dict()
            rep = replay(program, mt_corpus(camp), Pattern.P2, rbudget, master_seed=master_seed + r,
                         max_steps=case.max_steps).to_dict()
            if out is not None:
                d = Path(out) / f"{mode}_{r}"
                write_campaign(d, report, case.program_text())
                write_json(d / "replay.json", rep, "replay_report")
            raw.append((mode, r, camp, rep))
            if log:
                log(f"{case.name} {mode} run {r}: N_mt/N_all={camp['mt_ratio']:.3f} "
                    f"({time.perf_counter() - t0:.1f}s)")
    table = aggregate(case.name, budget, rbudget, list(modes), raw)
    if out is not None:
        write_json(Path(out) / "bench.json", table, "bench_table")
    return table


def aggregate_dir(bench_dir: Path) -> dict:
    """Recompute the table of a ``bench --out`` directory from its raw reports."""
    bench_dir = Path(bench_dir)
    old = json.loads((bench_dir / "bench.json").read_text())
    raw = []
    for d in sorted(p for p in bench_dir.iterdir() if p.is_dir()):
        mode, _, run = d.name.rpartition("_")
        camp = json.loads((d / "campaign.json").read_text())
        rep = json.loads((d / "replay.json").read_text())
        raw.append((mode, int(run), strip_timing(camp), rep))
    return aggregate(old["case"], old["budget_execs"], old["replay_budget"], old["modes"], raw)


def format_table(table: dict) -> str:
    head = f"{'mode':<6}{'run':>5}{'seed':>6}{'N_all':>8}{'N_mt':>8}{'ratio':>8}{'N_c^m':>7}{'V_m':>5}{'N_B^m':>7}"
    lines = [f"case {table['case']}  budget {table['budget_execs']} execs  replay {table['replay_budget']}", head]
    for r in table["rows"]:
        lines.append(f"{r['mode']:<6}{r['run']:>5}{r['master_seed']:>6}{r['n_all']:>8}{r['n_mt']:>8}"
                     f"{r['mt_ratio']:>8.3f}{r['n_crash_mt']:>7}{r['vulnerabilities_mt']:>5}{r['n_bugs_mt']:>7}")
    for mode, m in table["medians"].items():
        lines.append(f"{mode:<6}{'med':>5}{'':>6}{'':>8}{m['n_mt']:>8}{m['mt_ratio']:>8.3f}"
                     f"{m['n_crash_mt']:>7}{m['vulnerabilities_mt']:>5}{m['n_bugs_mt']:>7}")
    for c in table["checks"]:
        lines.append(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}")
    return "\n".join(lines)
