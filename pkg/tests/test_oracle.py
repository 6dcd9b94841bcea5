import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from progen import random_program
from smallprogs import MAX_POINTS, small_cases
from threadfuzz.bench import load_case
from threadfuzz.executor import Machine, SchedulerConfig
from threadfuzz.mtir import parse_program
from threadfuzz.oracle import Enumerator, OracleLimit, arith, enumerate_interleavings, outcome_of, wrap64
from threadfuzz.replay import ViolationKind, detect_violations

CASES = list(small_cases())


def vm_outcomes(program, data, n, max_steps=20_000):
    m = Machine(program, None)
    cfg = SchedulerConfig(max_steps=max_steps)
    return {outcome_of(m.run(data, cfg, schedule_seed=s)) for s in range(n)}


def test_reference_arithmetic():
    assert arith("div", -7, 2) == -3
    assert arith("mod", -7, 2) == -1
    assert arith("div", 1, 0) is None
    assert arith("add", 2**63 - 1, 1) == -(2**63)
    assert wrap64(2**64 + 5) == 5


@pytest.mark.parametrize("name, program, data", CASES, ids=[c[0] for c in CASES])
def test_small_programs_are_small(name, program, data):
    assert enumerate_interleavings(program, data).interleaving_points <= MAX_POINTS


@pytest.mark.parametrize("name, program, data", CASES, ids=[c[0] for c in CASES])
def test_vm_reaches_exactly_the_oracle_outcomes(name, program, data):
    assert vm_outcomes(program, data, 2000) == enumerate_interleavings(program, data).outcomes


def test_fig1_final_counter_values():
    p = load_case("fig1").program()
    g = [x.name for x in p.globals].index("g_var")
    res = enumerate_interleavings(p, b"M\x10")
    assert res.final_values(g) == {2, 4}
    assert {o[2][g] for o in vm_outcomes(p, b"M\x10", 2000)} == {2, 4}


def test_lost_update_toy():
    p = parse_program(
        "global x = 0\n"
        "fn w(a) { b0: v = load x\n v2 = add v 1\n store x v2\n ret }\n"
        "fn main { b0: h = fork w 0\n k = fork w 0\n join h\n join k\n exit 0 }\n")
    assert enumerate_interleavings(p).final_values(0) == {1, 2}


def test_oracle_detects_deadlock():
    res = enumerate_interleavings(load_case("lockorder").program(), b"LR")
    assert "deadlock" in {o[0] for o in res.outcomes}


def test_oracle_state_limit():
    with pytest.raises(OracleLimit):
        enumerate_interleavings(load_case("fig1").program(), b"M\x10", max_states=10)


def test_oracle_spin_limit():
    p = parse_program("fn main { b0: jmp b0 }")
    with pytest.raises(OracleLimit):
        enumerate_interleavings(p, max_local_steps=1000)


@given(st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_vm_matches_oracle_on_random_programs(seed):
    p = random_program(seed, max_functions=4, loops=False)
    try:
        res = enumerate_interleavings(p, b"\x03\x01", max_states=50_000)
    except OracleLimit:
        return
    if res.interleaving_points <= MAX_POINTS:
        assert vm_outcomes(p, b"\x03\x01", 1500, 5000) == res.outcomes


@pytest.mark.parametrize("name, program, data", CASES, ids=[c[0] for c in CASES])
def test_detector_over_all_traces_matches_conflict_oracle(name, program, data):
    en = Enumerator(program, data)
    found = set()
    for events, end, _ in en.traces():
        found |= {v.key for v in detect_violations(events, end[0]) if v.kind is ViolationKind.DATA_RACE}
    expected = {("data-race", tuple(sorted(map(str, pair))), var)
                for pair, var in enumerate_interleavings(program, data).races}
    assert found == expected


@pytest.mark.parametrize("name, data", [("toy_race", b""), ("toy_locked", b""), ("toy_div", b""),
                                        ("lockorder", b"LR"), ("race", b"R\x00"), ("leak", b"E")])
def test_sleep_set_reduction_keeps_outcomes_and_violations(name, data):
    p = load_case(name).program()

    def summary(reduce):
        en = Enumerator(p, data)
        outs, keys, n = set(), set(), 0
        for events, end, state in en.traces(reduce=reduce):
            n += 1
            outs.add(end)
            blocked = en.blocked(state) if end[0] == "deadlock" else []
            keys |= {v.key for v in detect_violations(events, end[0], blocked)}
        return outs, keys, n

    small, full = summary(True), summary(False)
    assert small[:2] == full[:2]
    assert small[2] <= full[2]
