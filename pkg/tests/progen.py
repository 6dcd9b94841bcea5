"""Seeded random mini-IR programs for property and oracle tests."""

from __future__ import annotations

import random

from threadfuzz.mtir import Program, parse_program

AOPS = ("add", "sub", "mul", "and", "or", "xor", "eq", "lt", "gt")


def random_program_text(seed: int, max_functions: int = 10, max_blocks: int = 5,
                        max_body: int = 5, loops: bool = True) -> str:
    """Source of a valid program. Locks are released in the block that takes
    them and the call graph is acyclic, so analysis never rejects it."""
    rng = random.Random(seed)
    n_fn = rng.randint(1, max_functions)
    n_glob = rng.randint(0, 3)
    n_mutex = rng.randint(0, 2)
    globs = [f"g{i}" for i in range(n_glob)]
    names = [f"f{i}" for i in range(1, n_fn)] + ["main"]
    lines = [f"mutex {m}" for m in range(n_mutex)]
    lines += [f"global {g} = {rng.randint(-3, 3)}" for g in globs]

    for fi, name in enumerate(names):
        is_main = name == "main"
        later = names[fi + 1:-1] if not is_main else names[:-1]
        callees = [c for c in later if c != name]
        n_blocks = rng.randint(1, max_blocks)
        bids = [f"b{i}" for i in range(n_blocks)]
        lines.append("")
        lines.append(f"fn {name}{'' if is_main else '(a)'} {{")
        handles = []
        for bi, bid in enumerate(bids):
            lines.append(f"{bid}:")
            body = []
            for _ in range(rng.randint(0, max_body)):
                kind = rng.random()
                if kind < 0.15:
                    body.append(f"x = const {rng.randint(-5, 5)}")
                elif kind < 0.3:
                    body.append(f"x = {rng.choice(AOPS)} x {rng.randint(0, 4)}")
                elif kind < 0.45 and globs:
                    body.append(f"x = load {rng.choice(globs)}")
                elif kind < 0.6 and globs:
                    if rng.random() < 0.5:
                        body.append(f"store {rng.choice(globs)} x")
                    else:
                        body.append(f"store {rng.choice(globs)} {rng.choice(('add', 'mul'))} {rng.randint(1, 3)}")
                elif kind < 0.68:
                    body.append(f"x = input {rng.randint(0, 3)}")
                elif kind < 0.76 and n_mutex:
                    m = rng.randrange(n_mutex)
                    inner = f"store {rng.choice(globs)} add 1" if globs else "nop"
                    body += [f"lock {m}", inner, f"unlock {m}"]
                elif kind < 0.84 and callees:
                    body.append(f"call {rng.choice(callees)} x")
                elif kind < 0.92 and callees and (is_main or rng.random() < 0.3):
                    h = f"h{len(handles)}"
                    handles.append(h)
                    body.append(f"{h} = fork {rng.choice(callees)} x")
                elif handles and rng.random() < 0.6:
                    body.append(f"join {handles.pop(0)}")
                else:
                    body.append("nop")
            # terminator
            targets = bids[bi + 1:] if not loops else bids
            if bi == n_blocks - 1 or not targets:
                body += [f"join {h}" for h in handles]
                handles = []
                body.append("exit 0" if is_main else "ret x")
            elif rng.random() < 0.6:
                body.append(f"br x {rng.choice(targets)} {rng.choice(targets)}")
            else:
                body.append(f"jmp {rng.choice(targets)}")
            lines += [f"    {s}" for s in body]
        lines.append("}")
    return "\n".join(lines) + "\n"


def random_program(seed: int, **kw) -> Program:
    return parse_program(random_program_text(seed, **kw))
