"""Concurrency-bug replay: trace detectors and the P1/P2 replay patterns."""

from __future__ import annotations

import enum
import random
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

from .executor import (
    K_FORK, K_JOIN, K_LOAD, K_LOCK, K_STORE, K_UNLOCK, ExecutionResult, ExitKind, Machine,
    SchedulerConfig,
)
from .fuzzer import repetition_count
from .mtir import Program, Site


class MalformedTrace(ValueError):
    pass


class ViolationKind(str, enum.Enum):
    DATA_RACE = "data-race"
    LOCK_ORDER = "lock-order-inversion"
    DEADLOCK = "deadlock"
    THREAD_LEAK = "thread-leak"


@dataclass(frozen=True)
class Event:
    """One synchronisation or shared-memory event.

    ``kind`` is read, write, update (atomic read-modify-write), lock, unlock,
    fork or join; ``other`` is the child (fork) or joined thread (join).
    """

    nctx: int
    site: Site
    kind: str
    var: str | None = None
    mutex: int | None = None
    other: int | None = None

    @property
    def is_access(self) -> bool:
        return self.kind in ("read", "write", "update")

    @property
    def is_write(self) -> bool:
        return self.kind in ("write", "update")


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    sites: tuple[Site, ...]
    var: str | None = None
    threads: tuple[int, ...] = ()
    schedule_seed: int | None = None

    @property
    def key(self) -> tuple:
        return (self.kind.value, tuple(sorted(str(s) for s in self.sites)), self.var or "")


class VectorClock:
    """Map from thread N_ctx to a logical counter; missing entries are zero."""

    __slots__ = ("c",)

    def __init__(self, c: dict[int, int] | None = None):
        self.c = dict(c or {})

    def copy(self) -> "VectorClock":
        return VectorClock(self.c)

    def get(self, t: int) -> int:
        return self.c.get(t, 0)

    def tick(self, t: int) -> None:
        self.c[t] = self.c.get(t, 0) + 1

    def join(self, other: "VectorClock") -> None:
        for t, v in other.c.items():
            if v > self.c.get(t, 0):
                self.c[t] = v

    def leq(self, other: "VectorClock") -> bool:
        return all(v <= other.get(t) for t, v in self.c.items())

    def __eq__(self, other) -> bool:
        return isinstance(other, VectorClock) and {k: v for k, v in self.c.items() if v} == \
            {k: v for k, v in other.c.items() if v}

    def __repr__(self) -> str:
        return f"VectorClock({self.c})"


# --------------------------------------------------------------------------
# trace conversion

def events_from_result(result: ExecutionResult) -> list[Event]:
    """Access and sync events of a traced VM execution.

    The kernel logs the crashing instruction before it fails, so the last
    step of a crashed run is dropped.
    """
    if result.trace is None:
        raise ValueError("execution was run without trace recording")
    tr = result.trace
    cp = tr.compiled
    code = cp.code
    n = len(tr)
    if result.status is ExitKind.CRASH:
        n -= 1
    out: list[Event] = []
    nctx, pcs, aux = tr.nctx.tolist(), tr.pc.tolist(), tr.aux.tolist()
    for i in range(n):
        pc = pcs[i]
        op = code[pc, 0]
        site = cp.sites[pc]
        t = nctx[i]
        if op == K_LOAD or op == K_STORE:
            gi = code[pc, 2]
            if gi < 0:
                continue
            var = cp.global_names[gi]
            kind = "read" if op == K_LOAD else ("update" if code[pc, 4] >= 0 else "write")
            out.append(Event(t, site, kind, var=var))
        elif op == K_LOCK or op == K_UNLOCK:
            out.append(Event(t, site, "lock" if op == K_LOCK else "unlock",
                             mutex=cp.mutex_ids[code[pc, 2]]))
        elif op == K_FORK:
            out.append(Event(t, site, "fork", other=aux[i]))
        elif op == K_JOIN:
            out.append(Event(t, site, "join", other=aux[i]))
    return out


# --------------------------------------------------------------------------
# detectors

def _race_pairs(events: list[Event]) -> list[tuple[Event, Event]]:
    clocks: dict[int, VectorClock] = defaultdict(VectorClock)
    clocks[0].tick(0)
    released: dict[int, VectorClock] = {}
    held: dict[int, set[int]] = defaultdict(set)
    owner: dict[int, int] = {}
    # latest access per (var, thread, site, kind, lockset): enough, because a later
    # access by the same thread is never ordered before anything the earlier one is not
    history: dict[str, dict[tuple, tuple[Event, int, frozenset]]] = defaultdict(dict)
    races = []
    for ev in events:
        t = ev.nctx
        vc = clocks[t]
        if ev.kind == "lock":
            if owner.get(ev.mutex) is not None:
                raise MalformedTrace(f"{ev.site}: lock of mutex {ev.mutex} held by thread {owner[ev.mutex]}")
            owner[ev.mutex] = t
            held[t].add(ev.mutex)
            if ev.mutex in released:
                vc.join(released[ev.mutex])
        elif ev.kind == "unlock":
            if owner.get(ev.mutex) != t:
                raise MalformedTrace(f"{ev.site}: thread {t} unlocks mutex {ev.mutex} it does not hold")
            del owner[ev.mutex]
            held[t].discard(ev.mutex)
            released[ev.mutex] = vc.copy()
            vc.tick(t)
        elif ev.kind == "fork":
            child = clocks[ev.other]
            child.join(vc)
            child.tick(ev.other)
            vc.tick(t)
        elif ev.kind == "join":
            vc.join(clocks[ev.other])
        elif ev.is_access:
            lockset = frozenset(held[t])
            for (u, _, _, _), (prev, epoch, plocks) in history[ev.var].items():
                if u == t or not (prev.is_write or ev.is_write):
                    continue
                if epoch <= vc.get(u):
                    continue  # prev happens-before ev
                if plocks & lockset:
                    continue
                races.append((prev, ev))
            history[ev.var][(t, ev.site, ev.kind, lockset)] = (ev, vc.get(t), lockset)
        else:
            raise MalformedTrace(f"unknown event kind {ev.kind!r}")
    return races


def _lock_order_inversions(events: list[Event]) -> list[Violation]:
    held: dict[int, list[tuple[int, Site]]] = defaultdict(list)
    edges: dict[tuple[int, int], dict[int, tuple[Site, Site]]] = defaultdict(dict)
    for ev in events:
        if ev.kind == "lock":
            for m, msite in held[ev.nctx]:
                edges[(m, ev.mutex)].setdefault(ev.nctx, (msite, ev.site))
            held[ev.nctx].append((ev.mutex, ev.site))
        elif ev.kind == "unlock":
            held[ev.nctx] = [(m, s) for m, s in held[ev.nctx] if m != ev.mutex]
    found = []
    graph: dict[int, set[int]] = defaultdict(set)
    for a, b in edges:
        graph[a].add(b)
    # two-lock cycles taken by different threads; longer cycles are reported
    # through their constituent edges when every edge comes from a distinct thread
    for (a, b), by_thread in sorted(edges.items()):
        if a >= b or (b, a) not in edges:
            continue
        back = edges[(b, a)]
        for t1, (s1, s2) in sorted(by_thread.items()):
            for t2, (s3, s4) in sorted(back.items()):
                if t1 != t2:
                    found.append(Violation(ViolationKind.LOCK_ORDER, (s1, s2, s3, s4),
                                           f"mutex:{a}<->{b}", (t1, t2)))
                    break
            else:
                continue
            break
    found.extend(_longer_cycles(edges, graph))
    return found


def _longer_cycles(edges, graph) -> list[Violation]:
    out = []
    nodes = sorted(graph)
    for start in nodes:
        # simple cycles of length >= 3 whose smallest node is ``start``
        stack = [(start, (start,))]
        while stack:
            node, path = stack.pop()
            for nxt in sorted(graph[node]):
                if nxt == start and len(path) >= 3:
                    cyc = list(zip(path, path[1:] + (start,)))
                    owners = [sorted(edges[e]) for e in cyc]
                    chosen = _distinct_owners(owners)
                    if chosen is not None:
                        sites = tuple(s for e, t in zip(cyc, chosen) for s in edges[e][t])
                        name = "->".join(str(m) for m in path)
                        out.append(Violation(ViolationKind.LOCK_ORDER, sites, f"mutex:{name}", tuple(chosen)))
                elif nxt > start and nxt not in path:
                    stack.append((nxt, path + (nxt,)))
    return out


def _distinct_owners(options: list[list[int]]):
    def rec(i, used):
        if i == len(options):
            return []
        for t in options[i]:
            if t not in used:
                rest = rec(i + 1, used | {t})
                if rest is not None:
                    return [t] + rest
        return None
    return rec(0, frozenset())


def detect_violations(events: Iterable[Event], status: str = "exit",
                      blocked: Iterable[tuple[int, Site]] = (),
                      schedule_seed: int | None = None) -> list[Violation]:
    """All violations visible in one execution's event sequence.

    ``status`` is the execution's exit kind; ``blocked`` lists (N_ctx, site)
    of threads stuck at a deadlock.
    """
    events = list(events)
    out: list[Violation] = []
    seen = set()
    for a, b in _race_pairs(events):
        v = Violation(ViolationKind.DATA_RACE, tuple(sorted((a.site, b.site))), a.var,
                      tuple(sorted((a.nctx, b.nctx))), schedule_seed)
        if v.key not in seen:
            seen.add(v.key)
            out.append(v)
    for v in _lock_order_inversions(events):
        v = Violation(v.kind, v.sites, v.var, v.threads, schedule_seed)
        if v.key not in seen:
            seen.add(v.key)
            out.append(v)
    blocked = sorted(blocked)
    if status == "deadlock" and blocked:
        out.append(Violation(ViolationKind.DEADLOCK, tuple(sorted(s for _, s in blocked)), None,
                             tuple(t for t, _ in blocked), schedule_seed))
    if status == "exit":
        forked = {ev.other: ev.site for ev in events if ev.kind == "fork"}
        joined = {ev.other for ev in events if ev.kind == "join"}
        for child in sorted(set(forked) - joined):
            out.append(Violation(ViolationKind.THREAD_LEAK, (forked[child],), None, (child,), schedule_seed))
    return out


def violations_of(result: ExecutionResult) -> list[Violation]:
    return detect_violations(events_from_result(result), result.status.value,
                             [(b.nctx, b.site) for b in result.blocked], result.schedule_seed)


# --------------------------------------------------------------------------
# replay patterns

class Pattern(str, enum.Enum):
    P1 = "p1"
    P2 = "p2"


@dataclass
class CorpusSeed:
    id: int
    data: bytes
    c_m: int = 0
    n_c: int | None = None

    def per_turn(self, pattern: Pattern, n0: int = 8, nv: int = 32) -> int:
        if pattern is Pattern.P1:
            return 1
        n_c = self.n_c if self.n_c is not None else repetition_count(self.c_m, n0, nv)
        return max(1, n_c // n0)


@dataclass
class BugReport:
    key: tuple
    kind: str
    sites: tuple[str, ...]
    var: str
    first_exposure: int  # executions until first seen (1-based)
    exposures: int
    seed_id: int
    schedule_seed: int

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "sites": list(self.sites),
            "var": self.var,
            "first_exposure": self.first_exposure,
            "exposures": self.exposures,
            "seed_id": self.seed_id,
            "schedule_seed": self.schedule_seed,
        }


@dataclass
class ReplayReport:
    pattern: str
    budget: int
    master_seed: int
    executions: int = 0
    violation_executions: int = 0
    bugs: dict = field(default_factory=dict)
    per_seed_executions: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def n_bugs(self) -> int:
        return len(self.bugs)

    def time_to_exposure(self, key: tuple) -> int | None:
        bug = self.bugs.get(key)
        return bug.first_exposure if bug else None

    def to_dict(self) -> dict:
        bugs = sorted(self.bugs.values(), key=lambda b: (b.first_exposure, b.key))
        return {
            "pattern": self.pattern,
            "budget": self.budget,
            "master_seed": self.master_seed,
            "executions": self.executions,
            "violation_executions": self.violation_executions,
            "n_bugs": self.n_bugs,
            "bugs": [b.to_dict() for b in bugs],
            "time_to_exposure": [
                {"kind": b.kind, "sites": list(b.sites), "var": b.var, "executions": b.first_exposure}
                for b in bugs
            ],
            "per_seed_executions": {str(k): v for k, v in sorted(self.per_seed_executions.items())},
            "timing": self.timing,
        }


def replay(program: Program, corpus: list[CorpusSeed], pattern: Pattern | str, budget: int,
           master_seed: int = 0, intervention: bool = True, max_steps: int = 20_000,
           n0: int = 8, nv: int = 32, stop_when: tuple | None = None) -> ReplayReport:
    """Round-robin replay of ``corpus`` under the detectors.

    P1 runs each seed once per turn; P2 runs it N_c / N_0 times in a row.
    Exactly ``budget`` executions are made (fewer only if ``stop_when``, a
    bug key, is exposed first).
    """
    pattern = Pattern(pattern)
    start = time.monotonic()
    rep = ReplayReport(pattern.value, budget, master_seed)
    if not corpus:
        return rep
    rng = random.Random(master_seed)
    machine = Machine(program, None)
    cfg = SchedulerConfig(max_steps=max_steps, intervention_enabled=intervention)
    done = False
    while not done and rep.executions < budget:
        for seed in corpus:
            for _ in range(seed.per_turn(pattern, n0, nv)):
                if rep.executions >= budget:
                    done = True
                    break
                sched = rng.getrandbits(64)
                res = machine.run(seed.data, cfg, schedule_seed=sched, trace=True, copy_coverage=False)
                rep.executions += 1
                rep.per_seed_executions[seed.id] = rep.per_seed_executions.get(seed.id, 0) + 1
                found = violations_of(res)
                if found:
                    rep.violation_executions += 1
                for v in found:
                    bug = rep.bugs.get(v.key)
                    if bug is None:
                        rep.bugs[v.key] = BugReport(v.key, v.key[0], v.key[1], v.key[2], rep.executions,
                                                    1, seed.id, sched)
                    else:
                        bug.exposures += 1
                if stop_when is not None and stop_when in rep.bugs:
                    done = True
                    break
            if done:
                break
    rep.timing = {"wall_seconds": time.monotonic() - start}
    return rep


def replay_p1(program: Program, corpus: list[CorpusSeed], budget: int, **kw) -> ReplayReport:
    return replay(program, corpus, Pattern.P1, budget, **kw)


def replay_p2(program: Program, corpus: list[CorpusSeed], budget: int, **kw) -> ReplayReport:
    return replay(program, corpus, Pattern.P2, budget, **kw)
