import random
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threadfuzz.bench import load_case
from threadfuzz.fuzzer import (
    ARITH_MAX,
    INTERESTING_VALUES,
    MUTATION_OPERATORS,
    Campaign,
    FuzzConfig,
    GlobalState,
    Seed,
    cov_new_mt_ctx,
    cov_new_trace,
    fuzz_campaign,
    mutate,
    mutation_chance,
    repetition_count,
    select_next_seed,
    triage_crash,
)
from threadfuzz.mtir import Site


def bucket(count: int) -> int:
    """Hit-count class: 1, 2, 3, 4-7, 8-15, 16-31, 32-127, 128+."""
    for limit, cls in ((0, 0), (1, 1), (2, 2), (3, 4), (7, 8), (15, 16), (31, 32), (127, 64)):
        if count <= limit:
            return cls
    return 128


def result_with(counts: dict[int, int], is_mt=False, s_ctx=(1, 1, 1)):
    cov = np.zeros(1 << 16, dtype=np.uint8)
    for slot, c in counts.items():
        cov[slot] = c
    return SimpleNamespace(coverage=cov, is_mt=is_mt, s_ctx=s_ctx)


# -- feedback

def test_first_execution_is_new():
    g = GlobalState()
    assert cov_new_trace(result_with({7: 1}), g)


def test_identical_execution_is_not_new():
    g = GlobalState()
    cov_new_trace(result_with({7: 1, 9: 3}), g)
    assert not cov_new_trace(result_with({7: 1, 9: 3}), g)


def test_hit_count_bucket_change_is_new():
    g = GlobalState()
    cov_new_trace(result_with({7: 1}), g)
    assert cov_new_trace(result_with({7: 5}), g)


@pytest.mark.parametrize("first, second", [(a, b) for a in (1, 2, 3, 4, 7, 8, 15, 16, 31, 32, 127, 128, 255)
                                           for b in (1, 2, 3, 5, 6, 9, 20, 40, 100, 200)])
def test_bucketing_against_table(first, second):
    g = GlobalState()
    cov_new_trace(result_with({42: first}), g)
    assert cov_new_trace(result_with({42: second}), g) == (bucket(first) != bucket(second))


@given(st.lists(st.dictionaries(st.integers(0, 15), st.integers(1, 255), max_size=6), min_size=1, max_size=6))
@settings(max_examples=100, deadline=None)
def test_virgin_map_tracks_union_of_buckets(runs):
    g = GlobalState()
    seen: dict[int, set[int]] = {}
    for counts in runs:
        fresh = any(bucket(c) not in seen.get(s, set()) for s, c in counts.items())
        assert cov_new_trace(result_with(counts), g) == fresh
        for s, c in counts.items():
            seen.setdefault(s, set()).add(bucket(c))


def test_mt_ctx_feedback():
    g = GlobalState()
    assert not cov_new_mt_ctx(result_with({}, is_mt=False), g)
    assert cov_new_mt_ctx(result_with({}, is_mt=True, s_ctx=(1, 2, 3)), g)
    assert not cov_new_mt_ctx(result_with({}, is_mt=True, s_ctx=(1, 2, 3)), g)


def test_same_schedule_replayed_is_not_new_ctx():
    from threadfuzz.executor import Machine
    p = load_case("fig1").program()
    m = Machine(p, None)
    g = GlobalState()
    assert cov_new_mt_ctx(m.run(b"M\x10", schedule_seed=5), g)
    assert not cov_new_mt_ctx(m.run(b"M\x10", schedule_seed=5), g)


# -- seed selection

def _selection_rate(front_ctx, front_trace, pending, mode="muzz", n=20_000):
    g = GlobalState()
    g.pending_ctx = int(pending)
    g.pending_trace = int(pending)
    s = Seed(b"x", 0, pending_ctx=front_ctx, pending_trace=front_trace)
    rng = random.Random(1)
    cfg = FuzzConfig(mode=mode)
    return sum(select_next_seed(s, g, rng, cfg) for _ in range(n)) / n, g


def test_selection_new_ctx_always():
    rate, _ = _selection_rate(True, False, True)
    assert rate == 1.0


@pytest.mark.parametrize("front_trace, pending, expected", [(True, True, 0.95), (False, True, 0.01),
                                                            (False, False, 0.15)])
def test_selection_probabilities(front_trace, pending, expected):
    rate, _ = _selection_rate(False, front_trace, pending)
    assert abs(rate - expected) <= 0.01


def test_afl_selection_never_consults_context():
    rate, g = _selection_rate(True, False, True, mode="afl")
    assert g.ctx_consultations == 0
    assert abs(rate - 0.01) <= 0.01


# -- repetition and mutation counts

@pytest.mark.parametrize("c_m, n_c", [(0, 8), (1, 16), (2, 24), (3, 32), (4, 40), (5, 40), (100, 40)])
def test_repetition_count(c_m, n_c):
    assert repetition_count(c_m) == n_c


def test_mutation_chance_clamps():
    assert mutation_chance(100, 10, 100, 10) == 128
    assert mutation_chance(1e9, 1000, 1, 1) == 16
    assert mutation_chance(1, 1, 1e6, 1e3) == 1024
    assert mutation_chance(200, 10, 100, 10) == 64


# -- mutation

def test_bitflip_high_bit():
    class Fixed(random.Random):
        def randrange(self, *a):
            return 7
    assert mutate(b"\x00", Fixed(), operator="bitflip") == b"\x80"


def test_delete_on_single_byte_is_noop():
    assert mutate(b"\x05", random.Random(0), operator="delete") == b"\x05"


def reference_splice(data: bytes, other: bytes, rng: random.Random) -> bytes:
    cut = rng.randint(1, len(data))
    start = rng.randrange(len(other))
    return data[:cut] + other[start:]


def test_splice_matches_reference():
    pool = [b"ABCDEFGH", b"xyz", b"0123456789"]
    for seed in range(50):
        data = bytes(range(seed % 7 + 1))
        got = mutate(data, random.Random(seed), pool, operator="splice")
        ref_rng = random.Random(seed)
        other = ref_rng.choice(pool)
        assert got == reference_splice(data, other, ref_rng)


def test_arith_stays_in_range():
    for seed in range(200):
        out = mutate(b"\x80", random.Random(seed), operator="arith8")
        assert 1 <= abs(out[0] - 0x80) <= ARITH_MAX


def test_interesting_values_written():
    values = set()
    for seed in range(300):
        out = mutate(b"\x11\x11\x11\x11", random.Random(seed), operator="interesting")
        values.add(out)
    as_ints = {int.from_bytes(v[i:i + 2], "little") for v in values for i in range(3)}
    assert {v & 0xFFFF for v in INTERESTING_VALUES if v > 255} <= as_ints


@given(st.binary(max_size=64), st.integers(0, 2**32), st.sampled_from(MUTATION_OPERATORS))
@settings(max_examples=300, deadline=None)
def test_mutation_output_bounds(data, seed, op):
    out = mutate(data, random.Random(seed), [b"pool"], max_len=48, operator=op)
    assert 1 <= len(out) <= 48
    assert out == mutate(data, random.Random(seed), [b"pool"], max_len=48, operator=op)


# -- triage

def crash_result(tag, frames, is_mt=True):
    sites = tuple(Site.parse(f) for f in frames)
    return SimpleNamespace(crash=SimpleNamespace(tag=tag, backtrace=sites), is_mt=is_mt, schedule_seed=0)


def test_triage_dedups_on_last_three_frames():
    g = GlobalState()
    a = crash_result("boom", ["f:b:0", "g:b:0", "h:b:0", "i:b:0", "j:b:0"])
    b = crash_result("boom", ["f:b:0", "g:b:0", "h:b:0", "i:b:0", "k:b:9"])
    assert triage_crash(a, g, b"a") is not None
    assert triage_crash(b, g, b"b") is None
    assert g.n_crash == 1


def test_triage_tag_distinguishes():
    g = GlobalState()
    frames = ["f:b:0", "g:b:0", "h:b:0"]
    assert triage_crash(crash_result("div-by-zero", frames), g, b"a")
    assert triage_crash(crash_result("overflow", frames), g, b"b")
    assert g.n_crash == 2


def test_single_threaded_crash_counted_separately():
    g = GlobalState()
    triage_crash(crash_result("x", ["f:b:0"], is_mt=False), g, b"a")
    assert (g.n_crash_mt, g.n_crash_st) == (0, 1)


# -- campaigns

@pytest.fixture(scope="module")
def fig1():
    return load_case("fig1").program()


def test_zero_budget_reports_initial_seeds(fig1):
    rep = fuzz_campaign(fig1, FuzzConfig(budget_execs=0), [b"M\x10", b"X"])
    assert rep.n_all == 2
    assert [q["initial"] for q in rep.queue] == [True, True]
    # only the calibration runs of the initial seeds happen
    assert rep.executions == sum(q["n_c"] for q in rep.queue)


def test_campaign_determinism(fig1):
    cfg = FuzzConfig(master_seed=9, budget_execs=2000)
    a = fuzz_campaign(fig1, cfg, [b"M\x10"]).to_dict()
    b = fuzz_campaign(fig1, cfg, [b"M\x10"]).to_dict()
    a.pop("timing"), b.pop("timing")
    assert a == b


@pytest.mark.parametrize("mode", ["muzz", "mafl", "afl"])
def test_campaign_invariants(mode):
    case = load_case("gate")
    camp = Campaign(case.program(), FuzzConfig(mode=mode, master_seed=1, budget_execs=3000), case.seeds)
    rep = camp.run()
    assert rep.executions == 3000
    assert rep.n_mt <= rep.n_all == len(rep.queue)
    assert rep.n_crash == rep.n_crash_mt + rep.n_crash_st
    for s in camp.queue:
        assert 8 <= s.n_c <= 40
        if s.is_mt:
            assert s.c_m >= 1
        if not s.initial:
            assert s.covered_new_trace or s.covered_new_mt_ctx
    if mode == "afl":
        assert rep.ctx_consultations == 0
    else:
        assert rep.ctx_consultations > 0


def test_resume_keeps_ids(fig1):
    first = fuzz_campaign(fig1, FuzzConfig(budget_execs=500), [b"M\x10"])
    ids = [q["id"] for q in first.queue]
    data = [bytes.fromhex(q["data_hex"]) for q in first.queue]
    second = fuzz_campaign(fig1, FuzzConfig(budget_execs=2000, master_seed=4), data, max(ids) + 1, ids)
    new_ids = [q["id"] for q in second.queue]
    assert new_ids[:len(ids)] == ids
    assert new_ids[len(ids):] == list(range(max(ids) + 1, max(ids) + 1 + len(new_ids) - len(ids)))


def test_stop_on_tag():
    case = load_case("toy_div")
    rep = fuzz_campaign(case.program(), FuzzConfig(budget_execs=5000, stop_on_tag="div-by-zero"), case.seeds)
    assert rep.stopped_on_tag
    assert "div-by-zero" in rep.crash_tags()
    assert rep.executions < 5000


def test_config_validation():
    with pytest.raises(ValueError):
        FuzzConfig(p_ynt=1.5)
    with pytest.raises(ValueError):
        FuzzConfig(budget_execs=-1)
    assert FuzzConfig(mode="afl").intervention is False
