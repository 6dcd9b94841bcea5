"""Deterministic VM for instrumented mini-IR programs.

The program and its instrumentation plan are lowered to flat int64 arrays
and run by a single kernel (:func:`_run_kernel`) that simulates threads
under a priority-weighted random scheduler. The kernel is compiled with
numba unless ``THREADFUZZ_DISABLE_JIT`` is set; both paths give identical
results because the kernel only does int64 arithmetic.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._jit import JIT_ENABLED, kernel_errstate, njit
from .analysis import InstrumentationPlan
from .mtir import ARITH_OPS, Op, Program, Site

MAP_SIZE = 1 << 16
MAX_TRANSITION_COUNT = 255
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_M64 = (1 << 64) - 1

# lowered opcodes
K_CONST, K_ARITH, K_LOAD, K_STORE, K_INPUT, K_INPUTLEN, K_BR, K_JMP, K_CALL, \
    K_RET, K_EXIT, K_CRASH, K_FORK, K_JOIN, K_LOCK, K_UNLOCK, K_NOP = range(17)
_OPCODE = {
    Op.CONST: K_CONST, Op.ARITH: K_ARITH, Op.LOAD: K_LOAD, Op.STORE: K_STORE,
    Op.INPUT: K_INPUT, Op.INPUTLEN: K_INPUTLEN, Op.BR: K_BR, Op.JMP: K_JMP,
    Op.CALL: K_CALL, Op.RET: K_RET, Op.EXIT: K_EXIT, Op.CRASH: K_CRASH,
    Op.FORK: K_FORK, Op.JOIN: K_JOIN, Op.LOCK: K_LOCK, Op.UNLOCK: K_UNLOCK, Op.NOP: K_NOP,
}
OPCODE_NAMES = {v: k.value for k, v in _OPCODE.items()}
_AOP = {name: i for i, name in enumerate(ARITH_OPS)}

# crash tags raised by the VM itself; program tags are appended after these
BUILTIN_TAGS = ("div-by-zero", "undeclared-var", "stack-overflow", "thread-limit",
                "bad-unlock", "bad-join")
T_DIV0, T_UNDECL, T_STACK, T_THREADS, T_UNLOCK, T_JOIN = range(6)

# kernel result codes
S_EXIT, S_CRASH, S_DEADLOCK, S_BUDGET = range(4)
# out[] layout
O_STATUS, O_CODE, O_STEPS, O_FORKED, O_ISMT, O_CRASH_TID, O_BT_LEN, O_TRACE_LEN, O_NTHREADS = range(9)
TH_RUNNABLE, TH_FINISHED = 0, 1


class ExitKind(str, enum.Enum):
    EXIT = "exit"
    CRASH = "crash"
    DEADLOCK = "deadlock"
    BUDGET = "step-budget-exhausted"


@dataclass
class SchedulerConfig:
    schedule_rng_seed: int = 0
    max_steps: int = 1_000_000
    num_thread_slots: int = 16
    intervention_enabled: bool = True
    max_call_depth: int = 64

    def __post_init__(self):
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.num_thread_slots < 1 or self.max_call_depth < 1:
            raise ValueError("num_thread_slots and max_call_depth must be positive")


# --------------------------------------------------------------------------
# hashing helpers (pure Python mirrors of the kernel arithmetic)

def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _M64
    return h


def tc_event_bytes(loc: int, nctx: int) -> bytes:
    """Byte encoding of one TC = <Loc, N_ctx> event as fed to the hash."""
    return bytes([loc & 0xFF, (loc >> 8) & 0xFF, nctx & 0xFF, (nctx >> 8) & 0xFF])


EMPTY_SIGNATURE = (FNV_OFFSET, FNV_OFFSET, FNV_OFFSET)


def _splitmix64(x: int) -> tuple[int, int]:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return x, z ^ (z >> 31)


def scheduler_state(seed: int) -> np.ndarray:
    """xoshiro128** state (four 32-bit words) derived from a 64-bit seed."""
    x = seed & _M64
    x, a = _splitmix64(x)
    x, b = _splitmix64(x)
    words = [a & 0xFFFFFFFF, a >> 32, b & 0xFFFFFFFF, b >> 32]
    if not any(words):
        words[0] = 1
    return np.array(words, dtype=np.int64)


# --------------------------------------------------------------------------
# kernels

@njit
def _next32(s):
    m = 0xFFFFFFFF
    s0 = s[0]
    s1 = s[1]
    s2 = s[2]
    s3 = s[3]
    x = (s1 * 5) & m
    x = ((x << 7) | (x >> 25)) & m
    result = (x * 9) & m
    t = (s1 << 9) & m
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = ((s3 << 11) | (s3 >> 21)) & m
    s[0] = s0
    s[1] = s1
    s[2] = s2
    s[3] = s3
    return result


@njit
def _fnv_byte(h, k, byte):
    m = 0xFFFFFFFF
    lo = h[k + 1] ^ byte
    hi = h[k]
    t = lo * 0x1B3
    h[k + 1] = t & m
    h[k] = (hi * 0x1B3 + (t >> 32) + (lo << 8)) & m


@njit
def _tc_event(h, cat, loc, nctx):
    k = 2 * cat
    _fnv_byte(h, k, loc & 0xFF)
    _fnv_byte(h, k, (loc >> 8) & 0xFF)
    _fnv_byte(h, k, nctx & 0xFF)
    _fnv_byte(h, k, (nctx >> 8) & 0xFF)


@njit
def _trunc_div(a, b):
    if b == -1:
        return -a
    q = a // b
    if q * b != a and (a < 0) != (b < 0):
        q += 1
    return q


@njit
def _arith(aop, a, b):
    # returns (value, ok); ok == 0 means division by zero
    if aop == 0:
        return a + b, 1
    if aop == 1:
        return a - b, 1
    if aop == 2:
        return a * b, 1
    if aop == 3 or aop == 4:
        if b == 0:
            return a * 0, 0
        q = _trunc_div(a, b)
        if aop == 3:
            return q, 1
        if b == -1:
            return a * 0, 1
        return a - q * b, 1
    if aop == 5:
        return a & b, 1
    if aop == 6:
        return a | b, 1
    if aop == 7:
        return a ^ b, 1
    if aop == 8:
        return a * 0 + (1 if a == b else 0), 1
    if aop == 9:
        return a * 0 + (1 if a != b else 0), 1
    if aop == 10:
        return a * 0 + (1 if a < b else 0), 1
    if aop == 11:
        return a * 0 + (1 if a <= b else 0), 1
    if aop == 12:
        return a * 0 + (1 if a > b else 0), 1
    return a * 0 + (1 if a >= b else 0), 1


@njit
def _val(locs, t, d, consts, o):
    if o >= 0:
        return locs[t, d, o]
    return consts[-o - 1]


@njit
def _run_kernel(code, consts, call_args, fn_entry, fn_nparams, labels, glob_init, n_mutex,
                entry_fn, inp, rng, max_steps, intervention, want_trace,
                glob, mutex_owner, cov, status, prio, depth, fr_fn, fr_pc, fr_dst, locs,
                prev_label, tc, out, bt, tr_nctx, tr_pc, tr_aux):
    n_slots = status.shape[0]
    max_depth = fr_pc.shape[1]
    n_locals = locs.shape[2]
    n_inp = inp.shape[0]

    for i in range(glob.shape[0]):
        glob[i] = glob_init[i]
    for i in range(n_mutex):
        mutex_owner[i] = -1
    cov[:] = 0
    for i in range(3):
        tc[2 * i] = 0xCBF29CE4
        tc[2 * i + 1] = 0x84222325
    for i in range(bt.shape[0]):
        bt[i] = 0

    # main thread
    status[0] = TH_RUNNABLE
    depth[0] = 1
    fr_fn[0, 0] = entry_fn
    fr_pc[0, 0] = fn_entry[entry_fn]
    fr_dst[0, 0] = -1
    for k in range(n_locals):
        locs[0, 0, k] = 0
    prev_label[0] = 0
    prio[0] = 1
    if intervention:
        prio[0] = 1 + ((_next32(rng) * 32) >> 32)
    nthreads = 1

    enabled = np.empty(n_slots, np.int64)
    steps = 0
    forked = 0
    is_mt = 0
    result = -1
    rcode = 0
    crash_tid = -1
    tlen = 0
    cap = tr_pc.shape[0]

    while True:
        n_en = 0
        total = 0
        for t in range(nthreads):
            if status[t] != TH_RUNNABLE:
                continue
            pc = fr_pc[t, depth[t] - 1]
            op = code[pc, 0]
            blocked = False
            if op == K_LOCK:
                blocked = mutex_owner[code[pc, 2]] != -1
            elif op == K_JOIN:
                tgt = _val(locs, t, depth[t] - 1, consts, code[pc, 2])
                if tgt >= 0 and tgt < nthreads and tgt != t and status[tgt] != TH_FINISHED:
                    blocked = True
            if not blocked:
                enabled[n_en] = t
                n_en += 1
                total += prio[t]
        if n_en == 0:
            result = S_DEADLOCK
            break
        if steps >= max_steps:
            result = S_BUDGET
            break
        if n_en == 1:
            t = enabled[0]
        else:
            r = (_next32(rng) * total) >> 32
            t = enabled[n_en - 1]
            acc = 0
            for j in range(n_en):
                acc += prio[enabled[j]]
                if r < acc:
                    t = enabled[j]
                    break
        steps += 1

        d = depth[t] - 1
        pc = fr_pc[t, d]
        op = code[pc, 0]
        dst = code[pc, 1]
        a = code[pc, 2]
        b = code[pc, 3]
        c = code[pc, 4]
        lab = labels[pc]
        if lab >= 0:
            slot = ((prev_label[t] >> 1) ^ lab) & 0xFFFF
            if cov[slot] < 255:
                cov[slot] += 1
            prev_label[t] = lab
        if want_trace:
            if tlen == cap:
                cap *= 2
                n1 = np.empty(cap, np.int64)
                n2 = np.empty(cap, np.int64)
                n3 = np.empty(cap, np.int64)
                n1[:tlen] = tr_nctx[:tlen]
                n2[:tlen] = tr_pc[:tlen]
                n3[:tlen] = tr_aux[:tlen]
                tr_nctx = n1
                tr_pc = n2
                tr_aux = n3
            tr_nctx[tlen] = t
            tr_pc[tlen] = pc
            tr_aux[tlen] = 0
            tlen += 1

        crash = -1
        advance = True
        if op == K_CONST:
            locs[t, d, dst] = _val(locs, t, d, consts, a)
        elif op == K_ARITH:
            v, ok = _arith(a, _val(locs, t, d, consts, b), _val(locs, t, d, consts, c))
            if ok == 0:
                crash = T_DIV0
            else:
                locs[t, d, dst] = v
        elif op == K_LOAD:
            if a < 0:
                crash = T_UNDECL
            else:
                locs[t, d, dst] = glob[a]
        elif op == K_STORE:
            if a < 0:
                crash = T_UNDECL
            else:
                v = _val(locs, t, d, consts, b)
                if c >= 0:
                    v, ok = _arith(c, glob[a], v)
                    if ok == 0:
                        crash = T_DIV0
                if crash < 0:
                    glob[a] = v
        elif op == K_INPUT:
            off = _val(locs, t, d, consts, a)
            if off >= 0 and off < n_inp:
                locs[t, d, dst] = inp[off]
            else:
                locs[t, d, dst] = 0
        elif op == K_INPUTLEN:
            locs[t, d, dst] = n_inp
        elif op == K_BR:
            advance = False
            if _val(locs, t, d, consts, a) != 0:
                fr_pc[t, d] = b
            else:
                fr_pc[t, d] = c
        elif op == K_JMP:
            advance = False
            fr_pc[t, d] = a
        elif op == K_CALL:
            advance = False
            if d + 1 >= max_depth:
                crash = T_STACK
            else:
                nd = d + 1
                for k in range(n_locals):
                    locs[t, nd, k] = 0
                for k in range(c):
                    locs[t, nd, k] = _val(locs, t, d, consts, call_args[b + k])
                fr_fn[t, nd] = a
                fr_pc[t, nd] = fn_entry[a]
                fr_dst[t, nd] = dst
                depth[t] = nd + 1
        elif op == K_RET:
            advance = False
            v = 0
            if b == 1:
                v = _val(locs, t, d, consts, a)
            if d == 0:
                if t == 0:
                    result = S_EXIT
                    rcode = v
                    break
                status[t] = TH_FINISHED
            else:
                if fr_dst[t, d] >= 0:
                    locs[t, d - 1, fr_dst[t, d]] = v
                depth[t] = d
                fr_pc[t, d - 1] += 1
        elif op == K_EXIT:
            result = S_EXIT
            rcode = _val(locs, t, d, consts, a)
            break
        elif op == K_CRASH:
            crash = a
        elif op == K_FORK:
            if nthreads >= n_slots:
                crash = T_THREADS
            else:
                nt = nthreads
                nthreads += 1
                forked += 1
                is_mt = 1
                status[nt] = TH_RUNNABLE
                depth[nt] = 1
                fr_fn[nt, 0] = a
                fr_pc[nt, 0] = fn_entry[a]
                fr_dst[nt, 0] = -1
                for k in range(n_locals):
                    locs[nt, 0, k] = 0
                if c == 1 and fn_nparams[a] > 0:
                    locs[nt, 0, 0] = _val(locs, t, d, consts, b)
                prev_label[nt] = 0
                prio[nt] = 1
                if intervention:
                    prio[nt] = 1 + ((_next32(rng) * 32) >> 32)
                if dst >= 0:
                    locs[t, d, dst] = nt
                if want_trace:
                    tr_aux[tlen - 1] = nt
        elif op == K_JOIN:
            tgt = _val(locs, t, d, consts, a)
            if tgt < 0 or tgt >= nthreads or tgt == t:
                crash = T_JOIN
            else:
                _tc_event(tc, 2, prev_label[t], t)
                if want_trace:
                    tr_aux[tlen - 1] = tgt
        elif op == K_LOCK:
            mutex_owner[a] = t
            _tc_event(tc, 0, prev_label[t], t)
        elif op == K_UNLOCK:
            if mutex_owner[a] != t:
                crash = T_UNLOCK
            else:
                mutex_owner[a] = -1
                _tc_event(tc, 1, prev_label[t], t)

        if crash >= 0:
            result = S_CRASH
            rcode = crash
            crash_tid = t
            n = 0
            for k in range(depth[t] - 1, -1, -1):
                bt[2 * n] = fr_fn[t, k]
                bt[2 * n + 1] = fr_pc[t, k]
                n += 1
            out[O_BT_LEN] = n
            break
        if advance:
            fr_pc[t, d] = pc + 1

    if is_mt == 0:
        for i in range(3):
            tc[2 * i] = 0xCBF29CE4
            tc[2 * i + 1] = 0x84222325
    out[O_STATUS] = result
    out[O_CODE] = rcode
    out[O_STEPS] = steps
    out[O_FORKED] = forked
    out[O_ISMT] = is_mt
    out[O_CRASH_TID] = crash_tid
    out[O_TRACE_LEN] = tlen
    out[O_NTHREADS] = nthreads
    return tr_nctx, tr_pc, tr_aux


# AFL hit-count buckets: 0, 1, 2, 3, 4-7, 8-15, 16-31, 32-127, 128-255
def _bucket_table() -> np.ndarray:
    lut = np.zeros(256, dtype=np.uint8)
    lut[1], lut[2], lut[3] = 1, 2, 4
    lut[4:8] = 8
    lut[8:16] = 16
    lut[16:32] = 32
    lut[32:128] = 64
    lut[128:] = 128
    return lut


BUCKETS = _bucket_table()


@njit
def _update_virgin_jit(cov, virgin, lut):
    words = cov.view(np.uint64)
    new = False
    for w in range(words.shape[0]):
        if words[w] == 0:
            continue
        base = w * 8
        for k in range(base, base + 8):
            bk = lut[cov[k]]
            if bk & (virgin[k] ^ 0xFF):
                new = True
                virgin[k] |= bk
    return new


def _update_virgin_np(cov, virgin, lut):
    bucketed = lut[cov]
    fresh = bucketed & ~virgin
    if not fresh.any():
        return False
    virgin |= bucketed
    return True


@njit
def _digest_jit(cov, lut):
    words = cov.view(np.uint64)
    h0 = 0xCBF29CE4
    h1 = 0x84222325
    h = np.empty(2, np.int64)
    h[0] = h0
    h[1] = h1
    for w in range(words.shape[0]):
        if words[w] == 0:
            continue
        base = w * 8
        for k in range(base, base + 8):
            if cov[k] != 0:
                _fnv_byte(h, 0, k & 0xFF)
                _fnv_byte(h, 0, k >> 8)
                _fnv_byte(h, 0, lut[cov[k]])
    return (h[0] << 32) | h[1]


def _digest_np(cov, lut):
    nz = np.flatnonzero(cov)
    data = np.empty((nz.size, 3), dtype=np.uint8)
    data[:, 0] = nz & 0xFF
    data[:, 1] = nz >> 8
    data[:, 2] = lut[cov[nz]]
    return np.int64(np.uint64(fnv1a64(data.tobytes())).view(np.int64))


def update_virgin(coverage: np.ndarray, virgin: np.ndarray) -> bool:
    """True if ``coverage`` has a slot whose hit bucket is not yet in ``virgin``.

    ``virgin`` accumulates the bucket bits seen so far and is updated in place.
    """
    fn = _update_virgin_jit if JIT_ENABLED else _update_virgin_np
    return bool(fn(coverage, virgin, BUCKETS))


def has_new_bits(coverage: np.ndarray, virgin: np.ndarray) -> bool:
    """Like :func:`update_virgin` but leaves ``virgin`` untouched."""
    return bool((BUCKETS[coverage] & ~virgin).any())


def coverage_digest(coverage: np.ndarray) -> int:
    """Hash of the bucketed coverage map; equal maps give equal digests."""
    if JIT_ENABLED:
        v = int(_digest_jit(coverage, BUCKETS))
    else:
        v = int(_digest_np(coverage, BUCKETS))
    return v & _M64


def new_virgin_map() -> np.ndarray:
    return np.zeros(MAP_SIZE, dtype=np.uint8)


# --------------------------------------------------------------------------
# lowering

@dataclass
class CompiledProgram:
    """Flat array form of a program plus an instrumentation plan."""

    program: Program
    code: np.ndarray
    consts: np.ndarray
    call_args: np.ndarray
    fn_entry: np.ndarray
    fn_nparams: np.ndarray
    labels: np.ndarray
    glob_init: np.ndarray
    fn_names: list[str]
    sites: list[Site]
    pc_of: dict[Site, int]
    global_names: list[str]
    mutex_ids: list[int]
    tags: list[str]
    max_locals: int
    entry_fn: int

    def site(self, pc: int) -> Site:
        return self.sites[pc]


def compile_program(program: Program, plan: InstrumentationPlan | None = None) -> CompiledProgram:
    fn_names = list(program.functions)
    fn_index = {n: i for i, n in enumerate(fn_names)}
    global_names = list(program.global_names)
    gindex = {n: i for i, n in enumerate(global_names)}
    mutex_ids = list(program.mutexes)
    mindex = {m: i for i, m in enumerate(mutex_ids)}
    tags = list(BUILTIN_TAGS)
    consts: list[int] = []
    const_index: dict[int, int] = {}
    call_args: list[int] = []

    def const(v: int) -> int:
        if v not in const_index:
            const_index[v] = len(consts)
            consts.append(v)
        return -(const_index[v] + 1)

    sites: list[Site] = []
    pc_of: dict[Site, int] = {}
    for site, _ in program.sites():
        pc_of[site] = len(sites)
        sites.append(site)

    code = np.zeros((len(sites), 6), dtype=np.int64)
    fn_entry = np.zeros(len(fn_names), dtype=np.int64)
    fn_nparams = np.zeros(len(fn_names), dtype=np.int64)
    max_locals = 1
    for f in program.functions.values():
        fi = fn_index[f.name]
        fn_entry[fi] = pc_of[Site(f.name, f.entry, 0)]
        fn_nparams[fi] = len(f.params)
        slots: dict[str, int] = {p: i for i, p in enumerate(f.params)}

        def slot(name: str) -> int:
            if name not in slots:
                slots[name] = len(slots)
            return slots[name]

        def opnd(v) -> int:
            return slot(v) if isinstance(v, str) else const(v)

        for b in f.blocks:
            for i, ins in enumerate(b.instructions):
                row = code[pc_of[Site(f.name, b.id, i)]]
                row[0] = _OPCODE[ins.op]
                row[1] = slot(ins.dst) if ins.dst is not None else -1
                a = ins.args
                if ins.op is Op.CONST:
                    row[2] = opnd(a[0])
                elif ins.op is Op.ARITH:
                    row[2], row[3], row[4] = _AOP[a[0]], opnd(a[1]), opnd(a[2])
                elif ins.op is Op.LOAD:
                    row[2] = gindex.get(a[0], -1)
                elif ins.op is Op.STORE:
                    row[2] = gindex.get(a[0], -1)
                    row[3] = opnd(a[-1])
                    row[4] = _AOP[a[1]] if len(a) == 3 else -1
                elif ins.op is Op.INPUT:
                    row[2] = opnd(a[0])
                elif ins.op is Op.BR:
                    row[2] = opnd(a[0])
                    row[3] = pc_of[Site(f.name, a[1], 0)]
                    row[4] = pc_of[Site(f.name, a[2], 0)]
                elif ins.op is Op.JMP:
                    row[2] = pc_of[Site(f.name, a[0], 0)]
                elif ins.op is Op.CALL:
                    row[2] = fn_index[a[0]]
                    row[3] = len(call_args)
                    row[4] = len(a) - 1
                    call_args.extend(opnd(x) for x in a[1:])
                elif ins.op is Op.RET:
                    if a:
                        row[2], row[3] = opnd(a[0]), 1
                elif ins.op is Op.EXIT:
                    row[2] = opnd(a[0])
                elif ins.op is Op.CRASH:
                    if a[0] not in tags:
                        tags.append(a[0])
                    row[2] = tags.index(a[0])
                elif ins.op is Op.FORK:
                    row[2] = fn_index[a[0]]
                    if len(a) == 2:
                        row[3], row[4] = opnd(a[1]), 1
                elif ins.op is Op.JOIN:
                    row[2] = opnd(a[0])
                elif ins.op in (Op.LOCK, Op.UNLOCK):
                    row[2] = mindex[a[0]]
        max_locals = max(max_locals, len(slots))

    labels = np.full(len(sites), -1, dtype=np.int64)
    if plan is not None:
        for site, lab in plan.deputies.items():
            labels[pc_of[site]] = lab
    return CompiledProgram(
        program=program,
        code=code,
        consts=np.array(consts or [0], dtype=np.int64),
        call_args=np.array(call_args or [0], dtype=np.int64),
        fn_entry=fn_entry,
        fn_nparams=fn_nparams,
        labels=labels,
        glob_init=np.array([g.init for g in program.globals], dtype=np.int64),
        fn_names=fn_names,
        sites=sites,
        pc_of=pc_of,
        global_names=global_names,
        mutex_ids=mutex_ids,
        tags=tags,
        max_locals=max_locals,
        entry_fn=fn_index[program.entry],
    )


# --------------------------------------------------------------------------
# results

_EXIT_KINDS = (ExitKind.EXIT, ExitKind.CRASH, ExitKind.DEADLOCK, ExitKind.BUDGET)


class RunSummary(NamedTuple):
    status: ExitKind
    is_mt: bool
    steps: int
    threads_forked: int


@dataclass(frozen=True)
class CrashInfo:
    tag: str
    backtrace: tuple[Site, ...]  # innermost frame first
    nctx: int


@dataclass(frozen=True)
class BlockedThread:
    nctx: int
    site: Site
    reason: str  # "lock" or "join"


@dataclass
class Trace:
    """Per-step record of one execution: thread N_ctx, pc and an auxiliary value.

    ``aux`` holds the child N_ctx for forks and the joined N_ctx for joins.
    """

    compiled: CompiledProgram
    nctx: np.ndarray
    pc: np.ndarray
    aux: np.ndarray

    def __len__(self) -> int:
        return int(self.pc.shape[0])

    def events(self):
        code = self.compiled.code
        for n, pc, aux in zip(self.nctx.tolist(), self.pc.tolist(), self.aux.tolist()):
            yield n, pc, int(code[pc, 0]), aux

    def lines(self) -> list[str]:
        out = []
        cp = self.compiled
        for n, pc, op, aux in self.events():
            s = cp.sites[pc]
            out.append(f"{n},{s.fn},{s.block},{s.index},{OPCODE_NAMES[op]},{aux}")
        return out


@dataclass
class ExecutionResult:
    status: ExitKind
    exit_code: int | None
    crash: CrashInfo | None
    coverage: np.ndarray
    s_ctx: tuple[int, int, int]
    is_mt: bool
    steps: int
    threads_forked: int
    final_globals: dict[str, int]
    schedule_seed: int
    blocked: tuple[BlockedThread, ...] = ()
    unfinished: tuple[int, ...] = ()
    trace: Trace | None = field(default=None, repr=False)

    @property
    def crashed(self) -> bool:
        return self.status is ExitKind.CRASH

    def dump_trace(self) -> str:
        if self.trace is None:
            raise ValueError("execution was run without trace recording")
        lines = self.trace.lines()
        tail = f"end,{self.status.value}"
        if self.crash is not None:
            tail += f",{self.crash.tag}"
        elif self.exit_code is not None:
            tail += f",{self.exit_code}"
        lines.append(tail)
        lines.extend(f"blocked,{b.nctx},{b.site},{b.reason}" for b in self.blocked)
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# machine

class Machine:
    """Reusable executor for one (program, plan) pair.

    Scratch buffers are allocated once and reused, so a Machine is not safe
    to share between threads; create one per worker.
    """

    def __init__(self, program: Program, plan: InstrumentationPlan | None = None,
                 num_thread_slots: int = 16, max_call_depth: int = 64):
        self.program = program
        self.plan = plan
        self.compiled = cp = compile_program(program, plan)
        self._slots = num_thread_slots
        self._depth = max_call_depth
        T, D, L = num_thread_slots, max_call_depth, cp.max_locals
        self._glob = np.zeros(max(len(cp.glob_init), 1), dtype=np.int64)
        self._glob_init = np.zeros_like(self._glob)
        self._glob_init[:len(cp.glob_init)] = cp.glob_init
        self._mutex = np.full(max(len(cp.mutex_ids), 1), -1, dtype=np.int64)
        self.coverage = np.zeros(MAP_SIZE, dtype=np.uint8)
        self._status = np.zeros(T, dtype=np.int64)
        self._prio = np.zeros(T, dtype=np.int64)
        self._depth_arr = np.zeros(T, dtype=np.int64)
        self._fr_fn = np.zeros((T, D), dtype=np.int64)
        self._fr_pc = np.zeros((T, D), dtype=np.int64)
        self._fr_dst = np.zeros((T, D), dtype=np.int64)
        self._locs = np.zeros((T, D, L), dtype=np.int64)
        self._prev = np.zeros(T, dtype=np.int64)
        self._tc = np.zeros(6, dtype=np.int64)
        self._out = np.zeros(9, dtype=np.int64)
        self._bt = np.zeros(2 * D, dtype=np.int64)
        self._empty_trace = np.zeros(1, dtype=np.int64)

    def _config(self, cfg: SchedulerConfig | None, seed: int | None) -> SchedulerConfig:
        cfg = cfg or SchedulerConfig()
        if cfg.num_thread_slots != self._slots or cfg.max_call_depth != self._depth:
            raise ValueError("SchedulerConfig slot/depth limits differ from this Machine's buffers")
        if seed is not None:
            cfg = SchedulerConfig(seed, cfg.max_steps, cfg.num_thread_slots,
                                  cfg.intervention_enabled, cfg.max_call_depth)
        return cfg

    def run_raw(self, data: bytes, schedule_seed: int, max_steps: int = 1_000_000,
                intervention: bool = True, trace: bool = False):
        """Run the kernel; results stay in the machine's buffers (see ``self._out``)."""
        cp = self.compiled
        inp = np.frombuffer(bytes(data), dtype=np.uint8)
        rng = scheduler_state(schedule_seed)
        self._out[O_BT_LEN] = 0
        if trace:
            bufs = (np.empty(1024, np.int64), np.empty(1024, np.int64), np.empty(1024, np.int64))
        else:
            bufs = (self._empty_trace, self._empty_trace, self._empty_trace)
        with kernel_errstate():
            return _run_kernel(
                cp.code, cp.consts, cp.call_args, cp.fn_entry, cp.fn_nparams, cp.labels,
                self._glob_init, len(cp.mutex_ids), cp.entry_fn, inp, rng, max_steps, intervention, trace,
                self._glob, self._mutex, self.coverage, self._status, self._prio,
                self._depth_arr, self._fr_fn, self._fr_pc, self._fr_dst, self._locs,
                self._prev, self._tc, self._out, self._bt, *bufs)

    def run(self, data: bytes, cfg: SchedulerConfig | None = None, *, schedule_seed: int | None = None,
            trace: bool = False, copy_coverage: bool = True) -> ExecutionResult:
        cfg = self._config(cfg, schedule_seed)
        bufs = self.run_raw(data, cfg.schedule_rng_seed, cfg.max_steps, cfg.intervention_enabled, trace)
        return self._result(cfg.schedule_rng_seed, bufs if trace else None, copy_coverage)

    def summary(self) -> "RunSummary":
        """Status of the last :meth:`run_raw` call without copying any buffers."""
        out = self._out
        return RunSummary(_EXIT_KINDS[int(out[O_STATUS])], bool(out[O_ISMT]),
                          int(out[O_STEPS]), int(out[O_FORKED]))

    def collect(self, seed: int, copy_coverage: bool = True) -> ExecutionResult:
        """Full result of the last :meth:`run_raw` call (made without tracing)."""
        return self._result(seed, None, copy_coverage)

    def signature(self) -> tuple[int, int, int]:
        tc = self._tc
        return tuple((int(tc[2 * i]) << 32) | int(tc[2 * i + 1]) for i in range(3))

    def _result(self, seed: int, bufs, copy_coverage: bool) -> ExecutionResult:
        cp = self.compiled
        out = self._out
        status = int(out[O_STATUS])
        nthreads = int(out[O_NTHREADS])
        crash = None
        exit_code = None
        blocked: list[BlockedThread] = []
        if status == S_CRASH:
            n = int(out[O_BT_LEN])
            frames = tuple(cp.sites[int(self._bt[2 * k + 1])] for k in range(n))
            crash = CrashInfo(cp.tags[int(out[O_CODE])], frames, int(out[O_CRASH_TID]))
        elif status == S_EXIT:
            exit_code = int(out[O_CODE])
        if status == S_DEADLOCK:
            for t in range(nthreads):
                if self._status[t] == TH_RUNNABLE:
                    pc = int(self._fr_pc[t, self._depth_arr[t] - 1])
                    reason = "lock" if cp.code[pc, 0] == K_LOCK else "join"
                    blocked.append(BlockedThread(t, cp.sites[pc], reason))
        unfinished = tuple(t for t in range(1, nthreads) if self._status[t] != TH_FINISHED)
        tr = None
        if bufs is not None:
            n = int(out[O_TRACE_LEN])
            tr = Trace(cp, bufs[0][:n].copy(), bufs[1][:n].copy(), bufs[2][:n].copy())
        return ExecutionResult(
            status=_EXIT_KINDS[status],
            exit_code=exit_code,
            crash=crash,
            coverage=self.coverage.copy() if copy_coverage else self.coverage,
            s_ctx=self.signature(),
            is_mt=bool(out[O_ISMT]),
            steps=int(out[O_STEPS]),
            threads_forked=int(out[O_FORKED]),
            final_globals={name: int(self._glob[i]) for i, name in enumerate(cp.global_names)},
            schedule_seed=seed,
            blocked=tuple(blocked),
            unfinished=unfinished,
            trace=tr,
        )


def execute(plan: InstrumentationPlan | None, program: Program, data: bytes,
            cfg: SchedulerConfig | None = None, trace: bool = False) -> ExecutionResult:
    """One-shot execution; builds a fresh :class:`Machine`."""
    cfg = cfg or SchedulerConfig()
    m = Machine(program, plan, cfg.num_thread_slots, cfg.max_call_depth)
    return m.run(data, cfg, trace=trace)


def distinct_signatures(results) -> int:
    """C_m: number of distinct S_ctx among the multithreaded results."""
    return len({r.s_ctx for r in results if r.is_mt})
