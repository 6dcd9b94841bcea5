"""Brute-force interleaving enumerator used as a reference model.

This is a separate tree-walking interpreter over the parsed program; it
shares no code with the VM kernel. Instructions that only touch thread-local
state commute with everything, so each thread runs them eagerly and the
search branches only at visible operations: shared loads and stores, lock,
unlock, fork, join, thread exit, program exit, crashes and divisions (which
may crash). Visited states are memoised, so the search is exhaustive over
reachable states rather than over paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .mtir import Op, Program, Site

_M64 = (1 << 64) - 1


class OracleLimit(RuntimeError):
    pass


def wrap64(v: int) -> int:
    v &= _M64
    return v - (1 << 64) if v >> 63 else v


def _trunc_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return q if (a < 0) == (b < 0) else -q


def arith(aop: str, a: int, b: int) -> int | None:
    """Reference semantics of the arithmetic operators; None on division by zero."""
    if aop in ("div", "mod"):
        if b == 0:
            return None
        q = _trunc_div(a, b)
        return wrap64(q if aop == "div" else a - q * b)
    table = {
        "add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b,
        "and": lambda: a & b, "or": lambda: a | b, "xor": lambda: a ^ b,
        "eq": lambda: int(a == b), "ne": lambda: int(a != b), "lt": lambda: int(a < b),
        "le": lambda: int(a <= b), "gt": lambda: int(a > b), "ge": lambda: int(a >= b),
    }
    return wrap64(table[aop]())


# a frame is (fn, block, index, locals as sorted tuple of pairs, ret_dst)
# a thread is (finished, frames)


@dataclass
class OracleResult:
    outcomes: set = field(default_factory=set)  # (kind, code_or_tag, globals tuple)
    races: set = field(default_factory=set)  # ((site, site), var)
    states: int = 0
    interleaving_points: int = 0  # most shared-variable accesses in one execution

    def final_values(self, var_index: int) -> set[int]:
        return {o[2][var_index] for o in self.outcomes}


class Enumerator:
    def __init__(self, program: Program, data: bytes, max_states: int = 200_000,
                 max_depth: int = 64, max_local_steps: int = 100_000):
        self.p = program
        self.data = bytes(data)
        self.gindex = {g.name: i for i, g in enumerate(program.globals)}
        self.mindex = {m: i for i, m in enumerate(program.mutexes)}
        self.max_states = max_states
        self.max_depth = max_depth
        self.max_local_steps = max_local_steps
        self.blocks = {f.name: f.block_map() for f in program.functions.values()}
        self.result = OracleResult()
        self._edges: dict = {}

    # -- helpers
    def instr(self, frame):
        return self.blocks[frame[0]][frame[1]].instructions[frame[2]]

    @staticmethod
    def value(frame, v) -> int:
        if isinstance(v, int):
            return v
        return dict(frame[3]).get(v, 0)

    @staticmethod
    def set_local(frame, name, v):
        if name is None:
            return frame
        loc = dict(frame[3])
        loc[name] = wrap64(v)
        return (frame[0], frame[1], frame[2], tuple(sorted(loc.items())), frame[4])

    @staticmethod
    def goto(frame, block, index=0):
        return (frame[0], block, index, frame[3], frame[4])

    def new_frame(self, fn: str, args: list[int], ret_dst):
        f = self.p.functions[fn]
        loc = tuple(sorted(zip(f.params, args)))
        return (fn, f.entry, 0, loc, ret_dst)

    def visible(self, frames) -> bool:
        ins = self.instr(frames[-1])
        op = ins.op
        if op in (Op.LOAD, Op.STORE, Op.LOCK, Op.UNLOCK, Op.FORK, Op.JOIN, Op.EXIT, Op.CRASH):
            return True
        if op is Op.ARITH and ins.args[0] in ("div", "mod"):
            return True
        if op is Op.RET and len(frames) == 1:
            return True
        if op is Op.CALL and len(frames) >= self.max_depth:
            return True
        return False

    def settle(self, frames: tuple) -> tuple:
        """Run thread-local instructions until the next visible one."""
        steps = 0
        while not self.visible(frames):
            steps += 1
            if steps > self.max_local_steps:
                raise OracleLimit("thread-local loop does not reach a visible operation")
            top = frames[-1]
            ins = self.instr(top)
            op, a = ins.op, ins.args
            nxt = self.goto(top, top[1], top[2] + 1)
            if op is Op.CONST:
                frames = frames[:-1] + (self.set_local(nxt, ins.dst, a[0]),)
            elif op is Op.ARITH:
                v = arith(a[0], self.value(top, a[1]), self.value(top, a[2]))
                frames = frames[:-1] + (self.set_local(nxt, ins.dst, v),)
            elif op is Op.INPUT:
                off = self.value(top, a[0])
                v = self.data[off] if 0 <= off < len(self.data) else 0
                frames = frames[:-1] + (self.set_local(nxt, ins.dst, v),)
            elif op is Op.INPUTLEN:
                frames = frames[:-1] + (self.set_local(nxt, ins.dst, len(self.data)),)
            elif op is Op.BR:
                target = a[1] if self.value(top, a[0]) != 0 else a[2]
                frames = frames[:-1] + (self.goto(top, target),)
            elif op is Op.JMP:
                frames = frames[:-1] + (self.goto(top, a[0]),)
            elif op is Op.CALL:
                args = [self.value(top, x) for x in a[1:]]
                frames = frames + (self.new_frame(a[0], args, ins.dst),)
            elif op is Op.RET:
                v = self.value(top, a[0]) if a else 0
                caller = frames[-2]
                caller = self.goto(caller, caller[1], caller[2] + 1)
                frames = frames[:-2] + (self.set_local(caller, top[4], v),)
            elif op is Op.NOP:
                frames = frames[:-1] + (nxt,)
            else:  # pragma: no cover - visible() covers the rest
                raise AssertionError(op)
        return frames

    # -- search
    def initial(self):
        main = self.settle((self.new_frame(self.p.entry, [], None),))
        return (tuple(g.init for g in self.p.globals), tuple(-1 for _ in self.p.mutexes),
                ((False, main),))

    def enabled(self, state) -> list[int]:
        _, owners, threads = state
        out = []
        for t, (done, frames) in enumerate(threads):
            if done:
                continue
            ins = self.instr(frames[-1])
            if ins.op is Op.LOCK and owners[self.mindex[ins.args[0]]] != -1:
                continue
            if ins.op is Op.JOIN:
                tgt = self.value(frames[-1], ins.args[0])
                if 0 <= tgt < len(threads) and tgt != t and not threads[tgt][0]:
                    continue
            out.append(t)
        return out

    def step(self, state, t):
        """Execute thread t's visible instruction: returns a new state or a terminal outcome."""
        globs, owners, threads = state
        done, frames = threads[t]
        top = frames[-1]
        ins = self.instr(top)
        op, a = ins.op, ins.args
        nxt = self.goto(top, top[1], top[2] + 1)
        threads = list(threads)
        globs_l = list(globs)
        owners_l = list(owners)

        def crash(tag):
            return ("crash", tag, globs)

        if op is Op.LOAD:
            if a[0] not in self.gindex:
                return crash("undeclared-var")
            frames = frames[:-1] + (self.set_local(nxt, ins.dst, globs[self.gindex[a[0]]]),)
        elif op is Op.STORE:
            if a[0] not in self.gindex:
                return crash("undeclared-var")
            gi = self.gindex[a[0]]
            v = self.value(top, a[-1])
            if len(a) == 3:
                v = arith(a[1], globs[gi], v)
                if v is None:
                    return crash("div-by-zero")
            globs_l[gi] = v
            frames = frames[:-1] + (nxt,)
        elif op is Op.ARITH:
            v = arith(a[0], self.value(top, a[1]), self.value(top, a[2]))
            if v is None:
                return crash("div-by-zero")
            frames = frames[:-1] + (self.set_local(nxt, ins.dst, v),)
        elif op is Op.LOCK:
            owners_l[self.mindex[a[0]]] = t
            frames = frames[:-1] + (nxt,)
        elif op is Op.UNLOCK:
            mi = self.mindex[a[0]]
            if owners[mi] != t:
                return crash("bad-unlock")
            owners_l[mi] = -1
            frames = frames[:-1] + (nxt,)
        elif op is Op.FORK:
            child = len(threads)
            if child >= 16:
                return crash("thread-limit")
            callee = self.p.functions[a[0]]
            args = [self.value(top, a[1])] if len(a) == 2 and callee.params else []
            threads.append((False, self.settle((self.new_frame(a[0], args, None),))))
            frames = frames[:-1] + (self.set_local(nxt, ins.dst, child),)
        elif op is Op.JOIN:
            tgt = self.value(top, a[0])
            if not (0 <= tgt < len(state[2])) or tgt == t:
                return crash("bad-join")
            frames = frames[:-1] + (nxt,)
        elif op is Op.EXIT:
            return ("exit", self.value(top, a[0]), globs)
        elif op is Op.CRASH:
            return crash(a[0])
        elif op is Op.RET:
            if t == 0:
                return ("exit", self.value(top, a[0]) if a else 0, globs)
            threads[t] = (True, frames)
            return (tuple(globs_l), tuple(owners_l), tuple(threads))
        elif op is Op.CALL:
            return crash("stack-overflow")
        threads[t] = (False, self.settle(frames))
        return (tuple(globs_l), tuple(owners_l), tuple(threads))

    def access(self, frames):
        ins = self.instr(frames[-1])
        if ins.op in (Op.LOAD, Op.STORE) and ins.args[0] in self.gindex:
            return ins.args[0], ins.op is Op.STORE
        return None

    def site(self, frames) -> Site:
        top = frames[-1]
        return Site(top[0], top[1], top[2])

    def run(self) -> OracleResult:
        start = self.initial()
        seen = {start}
        stack = [start]
        res = self.result
        while stack:
            state = stack.pop()
            res.states += 1
            if res.states > self.max_states:
                raise OracleLimit(f"more than {self.max_states} states")
            en = self.enabled(state)
            if not en:
                res.outcomes.add(("deadlock", None, state[0]))
                continue
            threads = state[2]
            for i, ti in enumerate(en):
                acc_i = self.access(threads[ti][1])
                if acc_i is None:
                    continue
                for tj in en[i + 1:]:
                    acc_j = self.access(threads[tj][1])
                    if acc_j and acc_j[0] == acc_i[0] and (acc_i[1] or acc_j[1]):
                        pair = tuple(sorted((self.site(threads[ti][1]), self.site(threads[tj][1]))))
                        res.races.add((pair, acc_i[0]))
            edges = self._edges.setdefault(state, [])
            for t in en:
                weight = int(self.access(threads[t][1]) is not None)
                nxt = self.step(state, t)
                if isinstance(nxt[0], str):
                    res.outcomes.add(nxt)
                    edges.append((None, weight))
                    continue
                edges.append((nxt, weight))
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        res.interleaving_points = self._longest(start)
        return res

    def _longest(self, start) -> int:
        """Most shared-variable accesses along any execution (the state graph is a DAG
        for terminating programs)."""
        memo: dict = {}
        stack = [(start, False)]
        while stack:
            state, expanded = stack.pop()
            edges = self._edges.get(state, [])
            if expanded:
                memo[state] = max((w + (memo[s] if s is not None else 0) for s, w in edges), default=0)
                continue
            if state in memo:
                continue
            memo[state] = 0
            stack.append((state, True))
            stack.extend((s, False) for s, _ in edges if s is not None and s not in memo)
        return memo[start]

    def blocked(self, state) -> list[tuple[int, Site]]:
        """(N_ctx, site) of every unfinished thread in a stuck state."""
        return [(t, self.site(frames)) for t, (done, frames) in enumerate(state[2]) if not done]

    # -- full traces
    def event(self, state, t):
        """The visible operation thread t is about to perform, as a replay Event."""
        from .replay import Event
        frames = state[2][t][1]
        ins = self.instr(frames[-1])
        site = self.site(frames)
        op, a = ins.op, ins.args
        if op is Op.LOAD and a[0] in self.gindex:
            return Event(t, site, "read", var=a[0])
        if op is Op.STORE and a[0] in self.gindex:
            return Event(t, site, "update" if len(a) == 3 else "write", var=a[0])
        if op in (Op.LOCK, Op.UNLOCK):
            return Event(t, site, op.value, mutex=a[0])
        if op is Op.FORK:
            return Event(t, site, "fork", other=len(state[2]))
        if op is Op.JOIN:
            return Event(t, site, "join", other=self.value(frames[-1], a[0]))
        return None

    def footprint(self, state, t):
        """What thread t's next visible operation touches, for independence checks.

        ("r"|"w", var) for shared accesses, ("m", mutex) for lock and unlock,
        ("f",) fork, ("j",) join, ("e",) end of a non-main thread, and None
        for operations that may end the program (exit, crash, division).
        """
        frames = state[2][t][1]
        ins = self.instr(frames[-1])
        op = ins.op
        if op in (Op.LOAD, Op.STORE) and ins.args[0] in self.gindex:
            return ("w" if op is Op.STORE else "r", ins.args[0])
        if op in (Op.LOCK, Op.UNLOCK):
            return ("m", ins.args[0])
        if op is Op.FORK:
            return ("f",)
        if op is Op.JOIN:
            return ("j",)
        if op is Op.RET and len(frames) == 1 and t != 0:
            return ("e",)
        return None

    @staticmethod
    def independent(a, b) -> bool:
        if a is None or b is None:
            return False
        ka, kb = a[0], b[0]
        if ka in "rw" and kb in "rw":
            return a[1] != b[1] or ka == kb == "r"
        if ka == kb == "m":
            return a[1] != b[1]
        # fork order fixes thread ids; a join waits for an end and needs its target forked
        return {ka, kb} not in ({"f"}, {"f", "j"}, {"j", "e"})

    def traces(self, max_paths: int = 100_000, reduce: bool = True):
        """Yield (events, end, state) for every schedule; ``end`` is the oracle outcome.

        Thread exit is not an event; forks and joins carry the other thread's
        N_ctx. Crashing operations are not included in the event list. With
        ``reduce`` a sleep-set search yields one schedule per class of
        schedules that differ only in the order of adjacent independent
        operations; such schedules have the same happens-before order, lock
        sets and outcome.
        """
        count = 0
        stack = [(self.initial(), (), frozenset())]
        while stack:
            state, events, sleep = stack.pop()
            en = self.enabled(state)
            if not en:
                count += 1
                yield list(events), ("deadlock", None, state[0]), state
                continue
            fp = {t: self.footprint(state, t) for t in en} if reduce else {}
            explored = set(sleep) if reduce else set()
            for t in en:
                if t in explored:
                    continue
                nxt = self.step(state, t)
                if isinstance(nxt[0], str):
                    count += 1
                    ev = self.event(state, t) if nxt[0] != "crash" else None
                    yield list(events) + ([ev] if ev else []), nxt, state
                else:
                    ev = self.event(state, t)
                    child_sleep = frozenset(u for u in explored if self.independent(fp.get(u), fp[t])) \
                        if reduce else frozenset()
                    stack.append((nxt, events + ((ev,) if ev else ()), child_sleep))
                if reduce:
                    explored.add(t)
                if count > max_paths:
                    raise OracleLimit(f"more than {max_paths} schedules")


def enumerate_interleavings(program: Program, data: bytes = b"", **kw) -> OracleResult:
    """Every final state (and every co-enabled conflicting access pair) over all schedules."""
    return Enumerator(program, data, **kw).run()


def enumerate_traces(program: Program, data: bytes = b"", max_paths: int = 100_000, **kw):
    """Every schedule as an event list; see :meth:`Enumerator.traces`."""
    return Enumerator(program, data, **kw).traces(max_paths)


def outcome_of(result) -> tuple:
    """Project a VM :class:`ExecutionResult` onto the oracle's outcome format."""
    globs = tuple(result.final_globals.values())
    kind = result.status.value
    if kind == "crash":
        return ("crash", result.crash.tag, globs)
    if kind == "exit":
        return ("exit", result.exit_code, globs)
    return (kind, None, globs)
