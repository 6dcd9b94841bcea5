"""Thread-aware static analysis and coverage-instrumentation planning."""

from __future__ import annotations

import enum
from collections import defaultdict, deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

from .mtir import Function, Instruction, MtirError, Op, Program, Site, count_instructions

P_S0 = 0.5
P_M0 = 0.33
MC_PREFERRED_MAX = 10
DEGENERATE_P_CC = 0.1
LABEL_BITS = 16

_MASK64 = (1 << 64) - 1


class UnbalancedLocks(MtirError):
    def __init__(self, function: str, site: Site):
        super().__init__(f"{function}: lock count can go negative at {site}")
        self.function = function
        self.site = site


class InstrMode(str, enum.Enum):
    MUZZ_INS = "muzz"
    AFL_INS = "afl"


# --------------------------------------------------------------------------
# ICFG

@dataclass
class ICFG:
    """Instruction-level control-flow graph with call and fork edges.

    ``succ``/``pred`` hold intra-procedural edges only; ``call_edges`` and
    ``fork_edges`` link a call/fork site to the callee's first instruction.
    """

    program: Program
    succ: dict[Site, list[Site]]
    pred: dict[Site, list[Site]]
    call_edges: set[tuple[Site, Site]]
    fork_edges: set[tuple[Site, Site]]

    @property
    def nodes(self) -> list[Site]:
        return list(self.succ)

    def callees(self, fn: str) -> set[str]:
        return {dst.fn for src, dst in self.call_edges if src.fn == fn}

    def forked(self, fn: str) -> set[str]:
        return {dst.fn for src, dst in self.fork_edges if src.fn == fn}

    def reachable_functions(self, roots: Iterable[str], forks: bool = True) -> set[str]:
        graph: dict[str, set[str]] = defaultdict(set)
        edges = self.call_edges | self.fork_edges if forks else self.call_edges
        for src, dst in edges:
            graph[src.fn].add(dst.fn)
        seen = set(roots)
        todo = deque(seen)
        while todo:
            for nxt in graph[todo.popleft()]:
                if nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        return seen

    def function_sites(self, fn: str) -> list[Site]:
        return [s for s in self.succ if s.fn == fn]


def build_icfg(p: Program) -> ICFG:
    succ: dict[Site, list[Site]] = {}
    pred: dict[Site, list[Site]] = defaultdict(list)
    calls: set[tuple[Site, Site]] = set()
    forks: set[tuple[Site, Site]] = set()
    for f in p.functions.values():
        for b in f.blocks:
            n = len(b.instructions)
            for i, ins in enumerate(b.instructions):
                site = Site(f.name, b.id, i)
                out = [Site(f.name, b.id, i + 1)] if i + 1 < n else []
                out.extend(Site(f.name, t, 0) for t in dict.fromkeys(ins.targets()))
                succ[site] = out
                pred.setdefault(site, [])
                for o in out:
                    pred[o].append(site)
                if ins.op in (Op.CALL, Op.FORK):
                    callee = p.functions[ins.args[0]]
                    edge = (site, Site(callee.name, callee.entry, 0))
                    (calls if ins.op is Op.CALL else forks).add(edge)
    return ICFG(p, succ, dict(pred), calls, forks)


# --------------------------------------------------------------------------
# thread sets

@dataclass(frozen=True)
class ThreadSets:
    tfork: frozenset[Site] = frozenset()
    tjoin: frozenset[Site] = frozenset()
    tlock: frozenset[Site] = frozenset()
    tunlock: frozenset[Site] = frozenset()
    tsharevar: frozenset[str] = frozenset()
    f_fork: frozenset[str] = frozenset()


def _sites_with(icfg: ICFG, fns: set[str], op: Op) -> frozenset[Site]:
    prog = icfg.program
    return frozenset(s for s in icfg.succ if s.fn in fns and prog.instr(s).op is op)


def _forward_reach(icfg: ICFG, starts: Iterable[Site]) -> set[Site]:
    seen: set[Site] = set()
    todo = deque()
    for s in starts:
        for nxt in icfg.succ[s]:
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    while todo:
        for nxt in icfg.succ[todo.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    return seen


def compute_thread_sets(icfg: ICFG) -> ThreadSets:
    prog = icfg.program
    live = icfg.reachable_functions([prog.entry])
    tfork = _sites_with(icfg, live, Op.FORK)
    if not tfork:
        return ThreadSets()
    f_fork = frozenset(prog.instr(s).args[0] for s in tfork)
    mt_funcs = icfg.reachable_functions(f_fork)
    shared = set()
    for s in icfg.succ:
        if s.fn in mt_funcs:
            var = prog.instr(s).shared_var()
            if var is not None:
                shared.add(var)
    main_forks = [s for s in tfork if s.fn == prog.entry]
    for s in _forward_reach(icfg, main_forks):
        var = prog.instr(s).shared_var()
        if var is not None:
            shared.add(var)
    return ThreadSets(
        tfork=tfork,
        tjoin=_sites_with(icfg, live, Op.JOIN),
        tlock=_sites_with(icfg, live, Op.LOCK),
        tunlock=_sites_with(icfg, live, Op.UNLOCK),
        tsharevar=frozenset(shared),
        f_fork=f_fork,
    )


# --------------------------------------------------------------------------
# suspicious interleaving scope

@dataclass(frozen=True)
class SuspiciousScope:
    instructions: frozenset[Site] = frozenset()

    def __contains__(self, site: Site) -> bool:
        return site in self.instructions

    def __len__(self) -> int:
        return len(self.instructions)

    def in_block(self, fn: str, block: str) -> list[Site]:
        return sorted(s for s in self.instructions if s.fn == fn and s.block == block)


_FORK_CAP = 64


def fork_region(icfg: ICFG, fn: str) -> set[Site]:
    """Sites of ``fn`` that may run while a thread it forked is still unjoined.

    Forward may-analysis of the outstanding fork count (fork +1, join -1,
    merge by max, saturating).
    """
    prog = icfg.program
    sites = icfg.function_sites(fn)
    if not sites:
        return set()
    entry = Site(fn, prog.functions[fn].entry, 0)
    count_in: dict[Site, int] = {entry: 0}
    todo = deque([entry])
    while todo:
        s = todo.popleft()
        c = count_in[s]
        op = prog.instr(s).op
        out = min(c + 1, _FORK_CAP) if op is Op.FORK else max(c - 1, 0) if op is Op.JOIN else c
        for nxt in icfg.succ[s]:
            if nxt not in count_in or out > count_in[nxt]:
                count_in[nxt] = out
                todo.append(nxt)
    return {s for s, c in count_in.items() if c > 0}


def lock_counts(icfg: ICFG, fn: str) -> dict[Site, int]:
    """Held-lock count at each reachable instruction of ``fn`` (minimum over paths)."""
    prog = icfg.program
    entry = Site(fn, prog.functions[fn].entry, 0)
    count_in: dict[Site, int] = {entry: 0}
    todo = deque([entry])
    while todo:
        s = todo.popleft()
        c = count_in[s]
        op = prog.instr(s).op
        if op is Op.UNLOCK and c == 0:
            raise UnbalancedLocks(fn, s)
        out = c + 1 if op is Op.LOCK else c - 1 if op is Op.UNLOCK else c
        for nxt in icfg.succ[s]:
            if nxt not in count_in or out < count_in[nxt]:
                count_in[nxt] = out
                todo.append(nxt)
    return count_in


def shared_dependent_sites(icfg: ICFG, fn: str, shared: frozenset[str]) -> set[Site]:
    """Sites of ``fn`` that access ``shared`` directly or through a local derived from it.

    Functions that never store to a shared variable contribute nothing.
    """
    prog = icfg.program
    f = prog.functions[fn]
    instrs = {s: prog.instr(s) for s in icfg.function_sites(fn)}
    if not any(i.op is Op.STORE and i.args[0] in shared for i in instrs.values()):
        return set()
    entry = Site(fn, f.entry, 0)
    taint_in: dict[Site, frozenset[str]] = {entry: frozenset()}
    todo = deque([entry])
    while todo:
        s = todo.popleft()
        ins = instrs[s]
        t = taint_in[s]
        if ins.dst is not None:
            derived = (ins.op is Op.LOAD and ins.args[0] in shared) or (
                ins.op is Op.ARITH and any(v in t for v in ins.used_locals()))
            t = t | {ins.dst} if derived else t - {ins.dst}
        for nxt in icfg.succ[s]:
            old = taint_in.get(nxt)
            new = t if old is None else old | t
            if new != old:
                taint_in[nxt] = new
                todo.append(nxt)
    hits = set()
    for s, t in taint_in.items():
        ins = instrs[s]
        if ins.shared_var() in shared or any(v in t for v in ins.used_locals()):
            hits.add(s)
    return hits


def extract_suspicious_scope(icfg: ICFG, ts: ThreadSets) -> SuspiciousScope:
    prog = icfg.program
    if not ts.f_fork:
        for fn in prog.functions:
            lock_counts(icfg, fn)
        return SuspiciousScope()
    mt_funcs = icfg.reachable_functions(ts.f_fork)
    c1: set[Site] = {s for s in icfg.succ if s.fn in mt_funcs}
    if prog.entry not in mt_funcs:
        c1 |= fork_region(icfg, prog.entry)
    scope: set[Site] = set()
    for fn in prog.functions:
        held = lock_counts(icfg, fn)
        if fn not in mt_funcs and fn != prog.entry:
            continue
        for s in shared_dependent_sites(icfg, fn, ts.tsharevar):
            if s in c1 and held.get(s, 0) == 0:
                scope.add(s)
    return SuspiciousScope(frozenset(scope))


def analyze_program(p: Program) -> tuple[ICFG, ThreadSets, SuspiciousScope]:
    icfg = build_icfg(p)
    ts = compute_thread_sets(icfg)
    return icfg, ts, extract_suspicious_scope(icfg, ts)


# --------------------------------------------------------------------------
# instrumentation probabilities

def cfg_edge_count(f: Function) -> int:
    return sum(len(set(b.successors())) for b in f.blocks)


def cyclomatic_complexity(f: Function) -> int:
    return cfg_edge_count(f) - len(f.blocks) + 2


def _p_cc_exact(edges: int, nodes: int) -> Fraction:
    mc = edges - nodes + 2
    if mc <= 0:
        return Fraction(DEGENERATE_P_CC)
    return min(Fraction(mc, MC_PREFERRED_MAX), Fraction(1))


def p_cc_from_counts(edges: int, nodes: int) -> float:
    """min((E - N + 2) / 10, 1), clamped below to 0.1 when E - N + 2 <= 0."""
    return float(_p_cc_exact(edges, nodes))


def p_s_from(p_cc: float, p_s0: float = P_S0) -> float:
    return min(p_cc, p_s0)


def p_m_from(p_cc: float, n_mem: int, n_instr: int, p_m0: float = P_M0) -> float:
    # repr() gives the shortest decimal, so 0.6 is treated as 3/5 rather than its binary neighbour
    return min(float(Fraction(repr(float(p_cc))) * Fraction(n_mem, n_instr)), p_m0)


def cyclomatic_probability(f: Function) -> float:
    return p_cc_from_counts(cfg_edge_count(f), len(f.blocks))


def selective_probability(f: Function, p_s0: float = P_S0) -> float:
    return p_s_from(cyclomatic_probability(f), p_s0)


def interleaving_probability(f: Function, block_id: str, p_m0: float = P_M0) -> float:
    n, n_mem = count_instructions(f).per_block[block_id]
    return min(float(_p_cc_exact(cfg_edge_count(f), len(f.blocks)) * Fraction(n_mem, n)), p_m0)


# --------------------------------------------------------------------------
# planning

class SplitMix64:
    """Small deterministic 64-bit generator used for placement and labels."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next() >> 11) * (1.0 / (1 << 53))


@dataclass
class InstrumentationPlan:
    mode: InstrMode
    rng_seed: int
    deputies: dict[Site, int]
    scope: frozenset[Site] = frozenset()
    mc: dict[str, int] = field(default_factory=dict)
    p_cc: dict[str, float] = field(default_factory=dict)
    p_s: dict[str, float] = field(default_factory=dict)
    p_m: dict[tuple[str, str], float] = field(default_factory=dict)

    @property
    def n_deputies(self) -> int:
        return len(self.deputies)


def placement_draws(p: Program, rng: SplitMix64) -> dict[Site, float]:
    """One uniform draw per instruction, in program order."""
    return {site: rng.uniform() for site, _ in p.sites()}


def assign_labels(sites: list[Site], rng: SplitMix64) -> dict[Site, int]:
    """Distinct non-zero 16-bit labels while they last, then arbitrary ones."""
    space = (1 << LABEL_BITS) - 1
    used: set[int] = set()
    labels = {}
    for s in sites:
        while True:
            lab = rng.next() & space
            if lab == 0:
                continue
            if lab not in used or len(used) >= space:
                break
        used.add(lab)
        labels[s] = lab
    return labels


def plan_instrumentation(
    p: Program,
    scope: SuspiciousScope | None,
    mode: InstrMode | str = InstrMode.MUZZ_INS,
    rng_seed: int = 0,
    *,
    p_s0: float = P_S0,
    p_m0: float = P_M0,
    p_m_override: float | None = None,
) -> InstrumentationPlan:
    """Choose deputy instructions and their labels.

    ``AFL_INS`` takes every block entry. ``MUZZ_INS`` always takes the entry
    of blocks intersecting the scope, takes other in-scope instructions
    with probability P_m(f, b), and takes entries of the remaining blocks
    with probability P_s(f).
    """
    mode = InstrMode(mode)
    members = scope.instructions if scope is not None else frozenset()
    rng = SplitMix64(rng_seed)
    u = placement_draws(p, rng)
    plan = InstrumentationPlan(mode, rng_seed, {}, members)
    chosen: list[Site] = []
    for f in p.functions.values():
        counts = count_instructions(f)
        exact = _p_cc_exact(cfg_edge_count(f), len(f.blocks))
        plan.mc[f.name] = cyclomatic_complexity(f)
        plan.p_cc[f.name] = p_cc = float(exact)
        plan.p_s[f.name] = p_s = p_s_from(p_cc, p_s0)
        for b in f.blocks:
            n, n_mem = counts.per_block[b.id]
            p_m = min(float(exact * Fraction(n_mem, n)), p_m0)
            if p_m_override is not None:
                p_m = p_m_override
            plan.p_m[(f.name, b.id)] = p_m
            entry = Site(f.name, b.id, 0)
            if mode is InstrMode.AFL_INS:
                chosen.append(entry)
                continue
            in_scope = [Site(f.name, b.id, i) for i in range(n) if Site(f.name, b.id, i) in members]
            if in_scope:
                chosen.append(entry)
                chosen.extend(s for s in in_scope if s.index > 0 and u[s] < p_m)
            elif u[entry] < p_s:
                chosen.append(entry)
    plan.deputies = assign_labels(chosen, rng)
    return plan


def build_plan(p: Program, mode: InstrMode | str = InstrMode.MUZZ_INS, rng_seed: int = 0, **kw) -> InstrumentationPlan:
    """Analysis plus planning in one call."""
    mode = InstrMode(mode)
    scope = analyze_program(p)[2] if mode is InstrMode.MUZZ_INS else None
    return plan_instrumentation(p, scope, mode, rng_seed, **kw)


def analysis_report(p: Program, mode: InstrMode | str = InstrMode.MUZZ_INS, rng_seed: int = 0, **kw) -> dict:
    """JSON-ready audit of the analysis and the resulting plan."""
    mode = InstrMode(mode)
    icfg, ts, scope = analyze_program(p)
    plan = plan_instrumentation(p, scope if mode is InstrMode.MUZZ_INS else None, mode, rng_seed, **kw)
    n_blocks = sum(len(f.blocks) for f in p.functions.values())
    functions = []
    for f in p.functions.values():
        counts = count_instructions(f)
        functions.append({
            "name": f.name,
            "edges": cfg_edge_count(f),
            "blocks": len(f.blocks),
            "mc": plan.mc[f.name],
            "p_cc": plan.p_cc[f.name],
            "p_s": plan.p_s[f.name],
            "block_stats": [
                {"id": b.id, "n": counts.per_block[b.id][0], "n_mem": counts.per_block[b.id][1],
                 "p_m": plan.p_m[(f.name, b.id)],
                 "in_scope": [str(s) for s in scope.in_block(f.name, b.id)]}
                for b in f.blocks
            ],
        })
    return {
        "mode": mode.value,
        "rng_seed": rng_seed,
        "thread_sets": {
            "tfork": sorted(map(str, ts.tfork)),
            "tjoin": sorted(map(str, ts.tjoin)),
            "tlock": sorted(map(str, ts.tlock)),
            "tunlock": sorted(map(str, ts.tunlock)),
            "tsharevar": sorted(ts.tsharevar),
            "f_fork": sorted(ts.f_fork),
        },
        "suspicious_scope": sorted(map(str, scope.instructions)),
        "functions": functions,
        "deputies": [{"site": str(s), "label": lab} for s, lab in plan.deputies.items()],
        "n_blocks": n_blocks,
        "n_instructions": sum(1 for _ in p.sites()),
        "n_deputies": plan.n_deputies,
        "deputy_inflation": (plan.n_deputies - n_blocks) / n_blocks,
    }
