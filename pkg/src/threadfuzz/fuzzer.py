"""The grey-box fuzzing loop with thread-aware seed selection and repeated execution."""

from __future__ import annotations

import enum
import hashlib
import random
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import InstrMode, build_plan
from .executor import (
    ExecutionResult, ExitKind, Machine, coverage_digest, new_virgin_map, update_virgin,
)
from .mtir import Program, format_program

INTERESTING_VALUES = (0, 1, -1, 127, 128, 255, 256, 32767, 65535)
ARITH_MAX = 35
TRIAGE_FRAMES = 3
MUTATION_OPERATORS = ("bitflip", "byteflip", "randbyte", "arith8", "arith16", "arith32",
                      "interesting", "delete", "duplicate", "splice")


class FuzzMode(str, enum.Enum):
    MUZZ = "muzz"
    MAFL = "mafl"
    AFL = "afl"

    @property
    def instr_mode(self) -> InstrMode:
        return InstrMode.MUZZ_INS if self is FuzzMode.MUZZ else InstrMode.AFL_INS

    @property
    def thread_aware(self) -> bool:
        return self is not FuzzMode.AFL


@dataclass
class FuzzConfig:
    mode: FuzzMode = FuzzMode.MUZZ
    master_seed: int = 0
    budget_execs: int = 10_000
    budget_seconds: float | None = None
    p_ynt: float = 0.95
    p_ynn: float = 0.01
    p_nnn: float = 0.15
    n0: int = 8
    nv: int = 32
    perf_k: int = 128
    min_mutations: int = 16
    max_mutations: int = 1024
    max_input_len: int = 1024
    max_steps: int = 20_000
    num_thread_slots: int = 16
    stop_on_tag: str | None = None

    def __post_init__(self):
        self.mode = FuzzMode(self.mode)
        for name in ("p_ynt", "p_ynn", "p_nnn"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.budget_execs < 0:
            raise ValueError("budget_execs must be non-negative")
        if self.n0 < 1 or self.nv < 0:
            raise ValueError("n0 must be positive and nv non-negative")

    @property
    def intervention(self) -> bool:
        # the AFL baseline has no schedule intervention
        return self.mode.thread_aware

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass
class Seed:
    data: bytes
    id: int
    parent: int | None = None
    is_mt: bool = False
    c_m: int = 0
    n_c: int = 0
    avg_exec_steps: float = 0.0
    discovered_at: int = 0
    covered_new_trace: bool = False
    covered_new_mt_ctx: bool = False
    pending_trace: bool = False
    pending_ctx: bool = False
    times_fuzzed: int = 0
    initial: bool = False

    def manifest(self) -> dict:
        return {
            "id": self.id,
            "parent": self.parent,
            "length": len(self.data),
            "is_mt": self.is_mt,
            "c_m": self.c_m,
            "n_c": self.n_c,
            "avg_exec_steps": round(self.avg_exec_steps, 6),
            "discovered_at": self.discovered_at,
            "covered_new_trace": self.covered_new_trace,
            "covered_new_mt_ctx": self.covered_new_mt_ctx,
            "initial": self.initial,
            "data_hex": self.data.hex(),
        }


@dataclass
class CrashRecord:
    key: tuple
    tag: str
    frames: tuple[str, ...]
    data: bytes
    is_mt: bool
    found_at: int
    schedule_seed: int
    seed_parent: int | None
    count: int = 1

    @property
    def key_id(self) -> str:
        return hashlib.sha1(repr(self.key).encode()).hexdigest()[:12]

    def to_dict(self) -> dict:
        return {
            "key_id": self.key_id,
            "tag": self.tag,
            "frames": list(self.frames),
            "is_mt": self.is_mt,
            "found_at": self.found_at,
            "schedule_seed": self.schedule_seed,
            "parent": self.seed_parent,
            "count": self.count,
            "data_hex": self.data.hex(),
        }


@dataclass
class GlobalState:
    virgin: np.ndarray = field(default_factory=new_virgin_map)
    seen_ctx: set = field(default_factory=set)
    crashes: dict = field(default_factory=dict)
    n_all: int = 0
    n_mt: int = 0
    n_crash: int = 0
    n_crash_mt: int = 0
    n_crash_st: int = 0
    execs: int = 0
    ctx_consultations: int = 0
    pending_trace: int = 0
    pending_ctx: int = 0
    deadlocks: int = 0
    hangs: int = 0


# --------------------------------------------------------------------------
# feedback

def cov_new_trace(result: ExecutionResult, g: GlobalState) -> bool:
    """New bucketed transition count relative to the virgin map; updates it."""
    return update_virgin(result.coverage, g.virgin)


def cov_new_mt_ctx(result: ExecutionResult, g: GlobalState) -> bool:
    """New context signature among multithreaded runs; records it."""
    g.ctx_consultations += 1
    if not result.is_mt or result.s_ctx in g.seen_ctx:
        return False
    g.seen_ctx.add(result.s_ctx)
    return True


def select_next_seed(front: Seed, g: GlobalState, rng: random.Random, cfg: FuzzConfig) -> bool:
    """Whether the seed at the queue front is fuzzed this round."""
    if cfg.mode.thread_aware:
        g.ctx_consultations += 1
        interesting = g.pending_ctx > 0 or g.pending_trace > 0
        if interesting:
            if front.pending_ctx:
                return True
            if front.pending_trace:
                return rng.random() < cfg.p_ynt
            return rng.random() < cfg.p_ynn
        return rng.random() < cfg.p_nnn
    if g.pending_trace > 0:
        return rng.random() < (cfg.p_ynt if front.pending_trace else cfg.p_ynn)
    return rng.random() < cfg.p_nnn


def repetition_count(c_m: int, n0: int = 8, nv: int = 32) -> int:
    """N_c = N_0 + min(N_v, N_0 * C_m)."""
    return n0 + min(nv, n0 * c_m)


def afl_repetition_count(nondeterministic: bool, n0: int = 8, nv: int = 32) -> int:
    """N_c = N_0 + N_v * B_v."""
    return n0 + (nv if nondeterministic else 0)


def mutation_chance(steps: float, length: int, base_steps: float, base_len: float,
                    k: int = 128, lo: int = 16, hi: int = 1024) -> int:
    """Mutants per selected seed; faster and shorter seeds get more."""
    steps = max(steps, 1.0)
    length = max(length, 1)
    score = k * (base_steps / steps) * (base_len / length)
    return int(min(max(round(score), lo), hi))


# --------------------------------------------------------------------------
# mutation

def _le_bytes(value: int, width: int) -> bytes:
    return (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little")


def mutate(data: bytes, rng: random.Random, pool: list[bytes] | None = None,
           max_len: int = 1024, operator: str | None = None) -> bytes:
    """Apply one randomly chosen mutation operator. The result is never empty."""
    buf = bytearray(data or b"\0")
    op = operator or rng.choice(MUTATION_OPERATORS)
    n = len(buf)
    if op == "bitflip":
        bit = rng.randrange(8 * n)
        buf[bit >> 3] ^= 1 << (bit & 7)
    elif op == "byteflip":
        buf[rng.randrange(n)] ^= 0xFF
    elif op == "randbyte":
        buf[rng.randrange(n)] = rng.randrange(256)
    elif op in ("arith8", "arith16", "arith32"):
        width = min({"arith8": 1, "arith16": 2, "arith32": 4}[op], n)
        pos = rng.randrange(n - width + 1)
        delta = rng.randint(1, ARITH_MAX) * (1 if rng.random() < 0.5 else -1)
        cur = int.from_bytes(buf[pos:pos + width], "little")
        buf[pos:pos + width] = _le_bytes(cur + delta, width)
    elif op == "interesting":
        v = rng.choice(INTERESTING_VALUES)
        width = min(1 if -128 <= v <= 255 else 2, n)
        pos = rng.randrange(n - width + 1)
        buf[pos:pos + width] = _le_bytes(v, width)
    elif op == "delete":
        if n > 1:
            size = rng.randint(1, n - 1)
            pos = rng.randrange(n - size + 1)
            del buf[pos:pos + size]
    elif op == "duplicate":
        size = rng.randint(1, min(n, 32))
        src = rng.randrange(n - size + 1)
        dst = rng.randrange(n + 1)
        buf[dst:dst] = buf[src:src + size]
    elif op == "splice":
        other = rng.choice(pool) if pool else bytes(buf)
        cut = rng.randint(1, n)
        start = rng.randrange(len(other)) if other else 0
        buf = buf[:cut] + bytearray(other[start:])
    else:
        raise ValueError(f"unknown mutation operator {op!r}")
    return bytes(buf[:max_len]) or b"\0"


def triage_key(result: ExecutionResult) -> tuple:
    """Dedup key: crash tag plus the innermost frames of the backtrace."""
    frames = tuple(str(s) for s in result.crash.backtrace[:TRIAGE_FRAMES])
    return (result.crash.tag, frames)


def triage_crash(result: ExecutionResult, g: GlobalState, data: bytes,
                 parent: int | None = None) -> tuple | None:
    """Record a crash; returns its key when new, None for a duplicate."""
    key = triage_key(result)
    rec = g.crashes.get(key)
    if rec is not None:
        rec.count += 1
        return None
    g.crashes[key] = CrashRecord(key, key[0], key[1], bytes(data), result.is_mt, g.execs,
                                 result.schedule_seed, parent)
    g.n_crash += 1
    if result.is_mt:
        g.n_crash_mt += 1
    else:
        g.n_crash_st += 1
    return key


# --------------------------------------------------------------------------
# campaign

@dataclass
class CampaignReport:
    config: dict
    program_hash: str
    n_all: int
    n_mt: int
    n_crash: int
    n_crash_mt: int
    n_crash_st: int
    executions: int
    ctx_consultations: int
    deadlocks: int
    hangs: int
    crashes: list[dict]
    queue: list[dict]
    stopped_on_tag: bool = False
    timing: dict = field(default_factory=dict)

    @property
    def mt_ratio(self) -> float:
        return self.n_mt / self.n_all if self.n_all else 0.0

    def crash_tags(self) -> set[str]:
        return {c["tag"] for c in self.crashes}

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "program_hash": self.program_hash,
            "n_all": self.n_all,
            "n_mt": self.n_mt,
            "mt_ratio": self.mt_ratio,
            "n_crash": self.n_crash,
            "n_crash_mt": self.n_crash_mt,
            "n_crash_st": self.n_crash_st,
            "vulnerabilities_mt": [c["key_id"] for c in self.crashes if c["is_mt"]],
            "vulnerabilities_st": [c["key_id"] for c in self.crashes if not c["is_mt"]],
            "executions": self.executions,
            "ctx_consultations": self.ctx_consultations,
            "deadlocks": self.deadlocks,
            "hangs": self.hangs,
            "stopped_on_tag": self.stopped_on_tag,
            "crashes": self.crashes,
            "queue": self.queue,
            "timing": self.timing,
        }


class _Budget(Exception):
    pass


class Campaign:
    """One fuzzing campaign; a pure function of (program, config, initial seeds)."""

    def __init__(self, program: Program, config: FuzzConfig, initial_seeds: list[bytes],
                 first_id: int = 0, initial_ids: list[int] | None = None):
        if not initial_seeds:
            initial_seeds = [b"\0"]
        self.program = program
        self.cfg = config
        self.rng = random.Random(config.master_seed)
        self.plan = build_plan(program, config.mode.instr_mode, rng_seed=config.master_seed)
        self.machine = Machine(program, self.plan, num_thread_slots=config.num_thread_slots)
        self.g = GlobalState()
        self.queue: list[Seed] = []
        self.next_id = first_id
        self.initial = [bytes(s) or b"\0" for s in initial_seeds]
        # resumed campaigns keep the ids of seeds already on disk
        self.initial_ids = list(initial_ids) if initial_ids is not None else None
        if self.initial_ids is not None and len(self.initial_ids) != len(self.initial):
            raise ValueError("initial_ids must match initial_seeds")
        self._forced_id: int | None = None
        self._steps_total = 0.0
        self._len_total = 0
        self._deadline = None
        self._calibrating_initial = False
        self.stopped_on_tag = False

    # -- execution
    def _exec_one(self, data: bytes):
        g, cfg = self.g, self.cfg
        if not self._calibrating_initial and (
                g.execs >= cfg.budget_execs or (self._deadline and time.monotonic() > self._deadline)):
            raise _Budget
        seed = self.rng.getrandbits(64)
        m = self.machine
        m.run_raw(data, seed, cfg.max_steps, cfg.intervention)
        g.execs += 1
        return seed, m.summary()

    def run_seed(self, data: bytes, parent: int | None, force_admit: bool = False) -> Seed | None:
        """Run a candidate N_c times; admit it to the queue if it brought novelty."""
        cfg, g, m = self.cfg, self.g, self.machine
        thread_aware = cfg.mode.thread_aware
        new_trace = new_ctx = is_mt = False
        sigs: set = set()
        digests: set = set()
        steps = 0
        runs = 0
        target = cfg.n0
        while runs < target:
            try:
                sched, summ = self._exec_one(data)
            except _Budget:
                if runs == 0:
                    return None
                break
            runs += 1
            steps += summ.steps
            if summ.status is ExitKind.CRASH:
                res = m.collect(sched, copy_coverage=False)
                if triage_crash(res, g, data, parent) is not None and cfg.stop_on_tag == res.crash.tag:
                    self.stopped_on_tag = True
                update_virgin(m.coverage, g.virgin)
                return None
            if summ.status is ExitKind.DEADLOCK:
                g.deadlocks += 1
            elif summ.status is ExitKind.BUDGET:
                g.hangs += 1
            if update_virgin(m.coverage, g.virgin):
                new_trace = True
            if summ.is_mt:
                is_mt = True
                sig = m.signature()
                sigs.add(sig)
                if thread_aware:
                    g.ctx_consultations += 1
                    if sig not in g.seen_ctx:
                        g.seen_ctx.add(sig)
                        new_ctx = True
            if not thread_aware and runs <= cfg.n0:
                digests.add(coverage_digest(m.coverage))
            if runs == cfg.n0:
                if thread_aware:
                    target = repetition_count(len(sigs), cfg.n0, cfg.nv)
                else:
                    target = afl_repetition_count(len(digests) > 1, cfg.n0, cfg.nv)
        if not (new_trace or new_ctx or force_admit):
            return None
        sid = self._forced_id if force_admit and self._forced_id is not None else self.next_id
        if sid == self.next_id:
            self.next_id += 1
        s = Seed(
            data=bytes(data), id=sid, parent=parent, is_mt=is_mt, c_m=len(sigs),
            n_c=target, avg_exec_steps=steps / runs, discovered_at=g.execs,
            covered_new_trace=new_trace, covered_new_mt_ctx=new_ctx,
            pending_trace=new_trace, pending_ctx=new_ctx and thread_aware, initial=force_admit,
        )
        self.queue.append(s)
        g.n_all += 1
        g.n_mt += int(is_mt)
        g.pending_trace += int(s.pending_trace)
        g.pending_ctx += int(s.pending_ctx)
        self._steps_total += s.avg_exec_steps
        self._len_total += len(s.data)
        return s

    def _clear_pending(self, s: Seed) -> None:
        if s.pending_trace:
            s.pending_trace = False
            self.g.pending_trace -= 1
        if s.pending_ctx:
            s.pending_ctx = False
            self.g.pending_ctx -= 1

    def fuzz_one(self, s: Seed) -> None:
        cfg = self.cfg
        n = len(self.queue)
        m_count = mutation_chance(s.avg_exec_steps, len(s.data), self._steps_total / n,
                                  self._len_total / n, cfg.perf_k, cfg.min_mutations, cfg.max_mutations)
        pool = [q.data for q in self.queue if q.id != s.id]
        for _ in range(m_count):
            child = mutate(s.data, self.rng, pool, cfg.max_input_len)
            self.run_seed(child, s.id)
            if self.stopped_on_tag:
                break
        s.times_fuzzed += 1
        self._clear_pending(s)

    def run(self) -> CampaignReport:
        start = time.monotonic()
        cfg = self.cfg
        if cfg.budget_seconds is not None:
            self._deadline = start + cfg.budget_seconds
        # initial seeds are always calibrated, even with a zero budget
        self._calibrating_initial = True
        for i, data in enumerate(self.initial):
            self._forced_id = self.initial_ids[i] if self.initial_ids is not None else None
            self.run_seed(data, None, force_admit=True)
        self._forced_id = None
        self._calibrating_initial = False
        try:
            while self.queue and not self.stopped_on_tag and self.g.execs < cfg.budget_execs:
                for s in list(self.queue):
                    if self.stopped_on_tag:
                        break
                    if select_next_seed(s, self.g, self.rng, cfg):
                        self.fuzz_one(s)
        except _Budget:
            pass
        return self.report(time.monotonic() - start)

    def report(self, wall: float = 0.0) -> CampaignReport:
        g = self.g
        crashes = sorted((c.to_dict() for c in g.crashes.values()), key=lambda c: (c["found_at"], c["key_id"]))
        return CampaignReport(
            config=self.cfg.to_dict(),
            program_hash=hashlib.sha1(format_program(self.program).encode()).hexdigest(),
            n_all=g.n_all, n_mt=g.n_mt, n_crash=g.n_crash, n_crash_mt=g.n_crash_mt,
            n_crash_st=g.n_crash_st, executions=g.execs, ctx_consultations=g.ctx_consultations,
            deadlocks=g.deadlocks, hangs=g.hangs, crashes=crashes,
            queue=[s.manifest() for s in self.queue], stopped_on_tag=self.stopped_on_tag,
            timing={"wall_seconds": wall},
        )


def fuzz_campaign(program: Program, config: FuzzConfig, initial_seeds: list[bytes] | None = None,
                  first_id: int = 0, initial_ids: list[int] | None = None) -> CampaignReport:
    """Run the fuzzing loop until the execution (or wall-clock) budget is spent."""
    seeds = list(initial_seeds or [b"\0"])
    return Campaign(program, config, seeds, first_id, initial_ids).run()
