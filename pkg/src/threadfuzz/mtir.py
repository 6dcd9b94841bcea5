"""The concurrent mini-IR: data model, parser, validator and printer.

A program is a set of functions made of basic blocks. Shared state lives in
declared globals; thread creation, joins and mutexes are ordinary
instructions, so every thread-relevant site is visible syntactically.
See ``docs/grammar.md`` for the text format.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Union

Operand = Union[int, str]


class MtirError(Exception):
    """Base class for IR errors."""


class IRSyntaxError(MtirError):
    def __init__(self, line: int, col: int, msg: str):
        super().__init__(f"{line}:{col}: {msg}")
        self.line = line
        self.col = col
        self.msg = msg


class ValidationError(MtirError):
    pass


class Op(str, enum.Enum):
    CONST = "const"
    ARITH = "arith"
    LOAD = "load"
    STORE = "store"
    INPUT = "input"
    INPUTLEN = "inputlen"
    BR = "br"
    JMP = "jmp"
    CALL = "call"
    RET = "ret"
    EXIT = "exit"
    CRASH = "crash"
    FORK = "fork"
    JOIN = "join"
    LOCK = "lock"
    UNLOCK = "unlock"
    NOP = "nop"


ARITH_OPS = ("add", "sub", "mul", "div", "mod", "and", "or", "xor",
             "eq", "ne", "lt", "le", "gt", "ge")
TERMINATORS = frozenset({Op.BR, Op.JMP, Op.RET, Op.EXIT, Op.CRASH})
MEMORY_OPS = frozenset({Op.LOAD, Op.STORE, Op.INPUT})
# opcodes that only ever write their ``dst`` (everything else has no dst,
# except call/fork where it is optional)
_DST_REQUIRED = frozenset({Op.CONST, Op.ARITH, Op.LOAD, Op.INPUT, Op.INPUTLEN})
_DST_OPTIONAL = frozenset({Op.CALL, Op.FORK})


@dataclass(frozen=True)
class Instruction:
    """One IR instruction.

    ``args`` layout per opcode::

        const    (value,)
        arith    (aop, a, b)
        load     (var,)
        store    (var, value) | (var, aop, value)   # the latter is an atomic update
        input    (offset,)
        br       (cond, then_block, else_block)
        jmp      (block,)
        call     (fn, *args)
        ret      () | (value,)
        exit     (code,)
        crash    (tag,)
        fork     (fn,) | (fn, arg)
        join     (handle,)
        lock     (mutex,)
        unlock   (mutex,)
    """

    op: Op
    args: tuple = ()
    dst: str | None = None
    line: int = field(default=0, compare=False)

    @property
    def is_terminator(self) -> bool:
        return self.op in TERMINATORS

    @property
    def is_memory(self) -> bool:
        return self.op in MEMORY_OPS

    def shared_var(self) -> str | None:
        if self.op in (Op.LOAD, Op.STORE):
            return self.args[0]
        return None

    def reads_shared(self) -> bool:
        return self.op is Op.LOAD or (self.op is Op.STORE and len(self.args) == 3)

    def writes_shared(self) -> bool:
        return self.op is Op.STORE

    def used_locals(self) -> tuple[str, ...]:
        """Local variable names read by this instruction."""
        op, a = self.op, self.args
        if op is Op.ARITH:
            vals = a[1:]
        elif op is Op.STORE:
            vals = a[-1:]
        elif op in (Op.CONST, Op.INPUT, Op.EXIT, Op.JOIN):
            vals = a[:1]
        elif op is Op.BR:
            vals = a[:1]
        elif op is Op.CALL:
            vals = a[1:]
        elif op is Op.FORK:
            vals = a[1:]
        elif op is Op.RET:
            vals = a
        else:
            vals = ()
        return tuple(v for v in vals if isinstance(v, str))

    def targets(self) -> tuple[str, ...]:
        if self.op is Op.BR:
            return (self.args[1], self.args[2])
        if self.op is Op.JMP:
            return (self.args[0],)
        return ()


@dataclass(frozen=True)
class BasicBlock:
    id: str
    instructions: tuple[Instruction, ...]

    @property
    def terminator(self) -> Instruction:
        return self.instructions[-1]

    def successors(self) -> tuple[str, ...]:
        return self.terminator.targets()


@dataclass(frozen=True)
class Function:
    name: str
    params: tuple[str, ...]
    blocks: tuple[BasicBlock, ...]

    @property
    def entry(self) -> str:
        return self.blocks[0].id

    def block(self, bid: str) -> BasicBlock:
        for b in self.blocks:
            if b.id == bid:
                return b
        raise KeyError(bid)

    def block_map(self) -> dict[str, BasicBlock]:
        return {b.id: b for b in self.blocks}


@dataclass(frozen=True)
class GlobalVar:
    name: str
    init: int
    shared: bool = True


@dataclass(frozen=True)
class Program:
    functions: dict[str, Function]
    globals: tuple[GlobalVar, ...] = ()
    mutexes: tuple[int, ...] = ()
    entry: str = "main"

    def sites(self) -> Iterator[tuple["Site", Instruction]]:
        for f in self.functions.values():
            for b in f.blocks:
                for i, ins in enumerate(b.instructions):
                    yield Site(f.name, b.id, i), ins

    def instr(self, site: "Site") -> Instruction:
        return self.functions[site.fn].block(site.block).instructions[site.index]

    @property
    def global_names(self) -> tuple[str, ...]:
        return tuple(g.name for g in self.globals)


class Site(NamedTuple):
    """Identifies one instruction: function, block id, index within block."""

    fn: str
    block: str
    index: int

    def __str__(self) -> str:
        return f"{self.fn}:{self.block}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "Site":
        fn, block, index = text.rsplit(":", 2)
        return cls(fn, block, int(index))


# --------------------------------------------------------------------------
# lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<nl>\n)
  | (?P<int>-?\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<string>"[^"\n]*")
  | (?P<punct>[{}(),:=;])
    """,
    re.VERBOSE,
)


class _Tok(NamedTuple):
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise IRSyntaxError(line, pos - line_start + 1, f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        col = pos - line_start + 1
        if kind == "nl":
            toks.append(_Tok("sep", "\n", line, col))
            line += 1
            line_start = m.end()
        elif kind == "punct":
            toks.append(_Tok("sep" if m.group() == ";" else m.group(), m.group(), line, col))
        elif kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), line, col))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.pos = 0

    def peek(self, k: int = 0) -> _Tok:
        return self.toks[min(self.pos + k, len(self.toks) - 1)]

    def next(self) -> _Tok:
        tok = self.toks[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def error(self, tok: _Tok, msg: str) -> IRSyntaxError:
        return IRSyntaxError(tok.line, tok.col, msg)

    def expect(self, kind: str, what: str | None = None) -> _Tok:
        tok = self.next()
        if tok.kind != kind:
            raise self.error(tok, f"expected {what or kind}, got {tok.text or 'end of input'!r}")
        return tok

    def skip_seps(self) -> None:
        while self.peek().kind == "sep":
            self.next()

    def end_of_line(self) -> None:
        tok = self.peek()
        if tok.kind == "sep":
            self.next()
        elif tok.kind not in ("eof", "}"):
            raise self.error(tok, f"unexpected {tok.text!r}")

    # -- top level
    def program(self) -> Program:
        functions: dict[str, Function] = {}
        globals_: list[GlobalVar] = []
        mutexes: list[int] = []
        entry = "main"
        while True:
            self.skip_seps()
            tok = self.peek()
            if tok.kind == "eof":
                break
            if tok.kind != "ident":
                raise self.error(tok, f"expected declaration, got {tok.text!r}")
            if tok.text == "mutex":
                self.next()
                mutexes.append(int(self.expect("int", "mutex id").text))
                self.end_of_line()
            elif tok.text == "global":
                self.next()
                name = self.expect("ident", "global name").text
                self.expect("=", "'='")
                globals_.append(GlobalVar(name, int(self.expect("int", "integer").text)))
                self.end_of_line()
            elif tok.text == "entry":
                self.next()
                entry = self.expect("ident", "function name").text
                self.end_of_line()
            elif tok.text == "fn":
                fn = self.function()
                if fn.name in functions:
                    raise self.error(tok, f"duplicate function {fn.name!r}")
                functions[fn.name] = fn
            else:
                raise self.error(tok, f"unknown declaration {tok.text!r}")
        return Program(functions, tuple(globals_), tuple(mutexes), entry)

    def function(self) -> Function:
        self.expect("ident")
        name = self.expect("ident", "function name").text
        params: list[str] = []
        if self.peek().kind == "(":
            self.next()
            while self.peek().kind != ")":
                params.append(self.expect("ident", "parameter").text)
                if self.peek().kind == ",":
                    self.next()
                elif self.peek().kind != ")":
                    raise self.error(self.peek(), "expected ',' or ')'")
            self.next()
        self.skip_seps()
        self.expect("{", "'{'")
        blocks: list[BasicBlock] = []
        self.skip_seps()
        while self.peek().kind != "}":
            blocks.append(self.block())
            self.skip_seps()
        close = self.next()
        if not blocks:
            raise self.error(close, f"function {name!r} has no blocks")
        return Function(name, tuple(params), tuple(blocks))

    def at_label(self) -> bool:
        return self.peek().kind == "ident" and self.peek(1).kind == ":"

    def block(self) -> BasicBlock:
        if not self.at_label():
            raise self.error(self.peek(), "expected block label")
        label = self.next()
        self.next()
        instrs: list[Instruction] = []
        self.skip_seps()
        while self.peek().kind not in ("}", "eof") and not self.at_label():
            instrs.append(self.statement())
            self.skip_seps()
        if not instrs:
            raise self.error(label, f"block {label.text!r} is empty")
        return BasicBlock(label.text, tuple(instrs))

    # -- statements
    def statement(self) -> Instruction:
        first = self.peek()
        toks: list[_Tok] = []
        while self.peek().kind not in ("sep", "}", "eof"):
            toks.append(self.next())
        self.end_of_line()
        return _build_instruction(toks, self)


def _operand(tok: _Tok, p: _Parser) -> Operand:
    if tok.kind == "int":
        return int(tok.text)
    if tok.kind == "ident":
        return tok.text
    raise p.error(tok, f"expected operand, got {tok.text!r}")


def _ident(tok: _Tok, p: _Parser, what: str) -> str:
    if tok.kind != "ident":
        raise p.error(tok, f"expected {what}, got {tok.text!r}")
    return tok.text


def _build_instruction(toks: list[_Tok], p: _Parser) -> Instruction:
    dst = None
    line = toks[0].line
    if len(toks) >= 2 and toks[1].kind == "=":
        dst = _ident(toks[0], p, "destination")
        toks = toks[2:]
        if not toks:
            raise p.error(p.peek(), "missing right-hand side")
    head = toks[0]
    word = _ident(head, p, "opcode")
    rest = toks[1:]

    def arity(*ns: int) -> None:
        if len(rest) not in ns:
            raise p.error(head, f"{word!r} takes {' or '.join(map(str, ns))} operand(s), got {len(rest)}")

    if word in ARITH_OPS:
        arity(2)
        op, args = Op.ARITH, (word, _operand(rest[0], p), _operand(rest[1], p))
    elif word == "const":
        arity(1)
        if rest[0].kind != "int":
            raise p.error(rest[0], "const takes an integer literal")
        op, args = Op.CONST, (int(rest[0].text),)
    elif word == "load":
        arity(1)
        op, args = Op.LOAD, (_ident(rest[0], p, "global name"),)
    elif word == "store":
        arity(2, 3)
        var = _ident(rest[0], p, "global name")
        if len(rest) == 3:
            aop = _ident(rest[1], p, "update operator")
            if aop not in ARITH_OPS:
                raise p.error(rest[1], f"unknown update operator {aop!r}")
            args = (var, aop, _operand(rest[2], p))
        else:
            args = (var, _operand(rest[1], p))
        op = Op.STORE
    elif word == "input":
        arity(1)
        op, args = Op.INPUT, (_operand(rest[0], p),)
    elif word == "inputlen":
        arity(0)
        op, args = Op.INPUTLEN, ()
    elif word == "br":
        arity(3)
        op, args = Op.BR, (_operand(rest[0], p), _ident(rest[1], p, "block"), _ident(rest[2], p, "block"))
    elif word == "jmp":
        arity(1)
        op, args = Op.JMP, (_ident(rest[0], p, "block"),)
    elif word == "call":
        if not rest:
            raise p.error(head, "call needs a function name")
        op, args = Op.CALL, (_ident(rest[0], p, "function"), *(_operand(t, p) for t in rest[1:]))
    elif word == "ret":
        arity(0, 1)
        op, args = Op.RET, tuple(_operand(t, p) for t in rest)
    elif word == "exit":
        arity(1)
        op, args = Op.EXIT, (_operand(rest[0], p),)
    elif word == "crash":
        arity(1)
        tag = rest[0].text[1:-1] if rest[0].kind == "string" else _ident(rest[0], p, "crash tag")
        op, args = Op.CRASH, (tag,)
    elif word == "fork":
        arity(1, 2)
        op, args = Op.FORK, (_ident(rest[0], p, "function"), *(_operand(t, p) for t in rest[1:]))
    elif word == "join":
        arity(1)
        op, args = Op.JOIN, (_operand(rest[0], p),)
    elif word in ("lock", "unlock"):
        arity(1)
        if rest[0].kind != "int":
            raise p.error(rest[0], f"{word} takes a mutex id")
        op, args = (Op.LOCK if word == "lock" else Op.UNLOCK), (int(rest[0].text),)
    elif word == "nop":
        arity(0)
        op, args = Op.NOP, ()
    else:
        raise p.error(head, f"unknown opcode {word!r}")

    if op in _DST_REQUIRED and dst is None:
        raise p.error(head, f"{word!r} needs a destination")
    if dst is not None and op not in _DST_REQUIRED and op not in _DST_OPTIONAL:
        raise p.error(head, f"{word!r} does not produce a value")
    return Instruction(op, args, dst, line)


# --------------------------------------------------------------------------
# public API

def parse_program(text: str) -> Program:
    """Parse and validate IR source text."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IRSyntaxError(1, 1, f"source is not UTF-8: {exc}") from None
    program = _Parser(text).program()
    validate(program)
    return program


def validate(p: Program) -> None:
    """Raise :class:`ValidationError` if ``p`` breaks a structural invariant."""
    if p.entry not in p.functions:
        raise ValidationError(f"entry function {p.entry!r} is not defined")
    if p.functions[p.entry].params:
        raise ValidationError(f"entry function {p.entry!r} must take no parameters")
    names = [g.name for g in p.globals]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate global declaration")
    if len(set(p.mutexes)) != len(p.mutexes):
        raise ValidationError("duplicate mutex declaration")
    if any(m < 0 for m in p.mutexes):
        raise ValidationError("mutex ids must be non-negative")
    declared_mutexes = set(p.mutexes)
    for f in p.functions.values():
        if len(set(f.params)) != len(f.params):
            raise ValidationError(f"{f.name}: duplicate parameter")
        bids = [b.id for b in f.blocks]
        if len(set(bids)) != len(bids):
            raise ValidationError(f"{f.name}: duplicate block id")
        bidset = set(bids)
        for b in f.blocks:
            where = f"{f.name}:{b.id}"
            if not b.instructions:
                raise ValidationError(f"{where}: empty block")
            for ins in b.instructions[:-1]:
                if ins.is_terminator:
                    raise ValidationError(f"{where}: terminator {ins.op.value!r} before end of block")
            if not b.terminator.is_terminator:
                raise ValidationError(f"{where}: block does not end with a terminator")
            for ins in b.instructions:
                for t in ins.targets():
                    if t not in bidset:
                        raise ValidationError(f"{where}: branch to undefined block {t!r}")
                if ins.op in (Op.CALL, Op.FORK):
                    callee = p.functions.get(ins.args[0])
                    if callee is None:
                        raise ValidationError(f"{where}: {ins.op.value} of undefined function {ins.args[0]!r}")
                    nargs = len(ins.args) - 1
                    if ins.op is Op.CALL and nargs != len(callee.params):
                        raise ValidationError(
                            f"{where}: call to {callee.name!r} passes {nargs} argument(s), expects {len(callee.params)}")
                    if ins.op is Op.FORK and len(callee.params) > 1:
                        raise ValidationError(f"{where}: forked function {callee.name!r} takes more than one parameter")
                if ins.op in (Op.LOCK, Op.UNLOCK) and ins.args[0] not in declared_mutexes:
                    raise ValidationError(f"{where}: mutex {ins.args[0]} is not declared")
                if ins.op is Op.INPUT and isinstance(ins.args[0], int) and ins.args[0] < 0:
                    raise ValidationError(f"{where}: negative input offset")


def _fmt(v: Operand) -> str:
    return str(v)


def format_instruction(ins: Instruction) -> str:
    op, a = ins.op, ins.args
    if op is Op.ARITH:
        body = f"{a[0]} {_fmt(a[1])} {_fmt(a[2])}"
    elif op is Op.CRASH:
        tag = a[0]
        body = "crash " + (tag if re.fullmatch(r"[A-Za-z_][A-Za-z0-9_.]*", tag) else f'"{tag}"')
    else:
        body = " ".join([op.value, *(_fmt(x) for x in a)])
    return f"{ins.dst} = {body}" if ins.dst is not None else body


def format_program(p: Program) -> str:
    """Render ``p`` back to source text; ``parse_program`` accepts the result."""
    out: list[str] = []
    if p.entry != "main":
        out.append(f"entry {p.entry}")
    out.extend(f"mutex {m}" for m in p.mutexes)
    out.extend(f"global {g.name} = {g.init}" for g in p.globals)
    for f in p.functions.values():
        out.append("")
        params = f"({', '.join(f.params)})" if f.params else ""
        out.append(f"fn {f.name}{params} {{")
        for b in f.blocks:
            out.append(f"{b.id}:")
            out.extend(f"    {format_instruction(i)}" for i in b.instructions)
        out.append("}")
    return "\n".join(out) + "\n"


class InstrCounts(NamedTuple):
    n_blocks: int
    n_instr: int
    per_block: dict[str, tuple[int, int]]  # block id -> (N(b), N_m(b))


def count_instructions(f: Function) -> InstrCounts:
    """Block count, instruction count, and per-block (N(b), N_m(b))."""
    per_block = {b.id: (len(b.instructions), sum(1 for i in b.instructions if i.is_memory))
                 for b in f.blocks}
    return InstrCounts(len(f.blocks), sum(n for n, _ in per_block.values()), per_block)


def load_program(path) -> Program:
    with open(path, "rb") as fh:
        return parse_program(fh.read())
