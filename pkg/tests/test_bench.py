import pytest

from threadfuzz.bench import (
    EXTRAS,
    FAMILY,
    MODES,
    aggregate,
    aggregate_dir,
    format_table,
    list_cases,
    load_case,
    oracle_crash_tags,
    oracle_violation_keys,
    run_bench,
    scope_of,
)
from threadfuzz.corpus import validate_report


def test_case_list():
    assert list_cases() == list(FAMILY + EXTRAS)
    assert len(FAMILY) == 5
    with pytest.raises(KeyError):
        load_case("nope")


@pytest.mark.parametrize("name", FAMILY + EXTRAS)
def test_case_parses_and_scope_matches(name):
    case = load_case(name)
    assert case.name == name
    assert case.program().entry == "main"
    if case.expected_scope is not None:
        assert sorted(case.expected_scope) == scope_of(case)


@pytest.mark.parametrize("name", [n for n in FAMILY + EXTRAS if n != "crash"])
def test_planted_violations_match_oracle(name):
    case = load_case(name)
    for witness in {v.witness for v in case.planted_violations}:
        planted = {v.key for v in case.planted_violations if v.witness == witness}
        assert planted == oracle_violation_keys(case.program(), witness)


@pytest.mark.parametrize("name", ["crash", "toy_div"])
def test_planted_crashes_match_oracle(name):
    case = load_case(name)
    for c in case.planted_crashes:
        tags, avoidable = oracle_crash_tags(case.program(), c.witness)
        assert c.tag in tags
        assert avoidable == c.concurrency_dependent


def test_crash_needs_interleaving():
    case = load_case("crash")
    for seed in case.seeds:
        tags, _ = oracle_crash_tags(case.program(), seed)
        assert not tags


def _fake_run(mode, run, ratio):
    camp = {"config": {"master_seed": run}, "n_all": 10, "n_mt": int(ratio * 10), "mt_ratio": ratio,
            "n_crash_mt": 0, "vulnerabilities_mt": []}
    return mode, run, camp, {"n_bugs": 1}


def test_aggregate_checks():
    runs = [_fake_run("muzz", r, 0.9) for r in range(3)] + [_fake_run("mafl", r, 0.8) for r in range(3)] + \
           [_fake_run("afl", r, 0.7) for r in range(3)]
    table = aggregate("x", 10, 5, list(MODES), runs)
    assert all(c["passed"] for c in table["checks"]) and len(table["checks"]) == 3
    runs[-1] = _fake_run("afl", 2, 0.88)
    runs[-2] = _fake_run("afl", 1, 0.88)
    table = aggregate("x", 10, 5, list(MODES), runs)
    assert [c["passed"] for c in table["checks"]] == [True, False, False]


def test_aggregate_is_order_independent():
    runs = [_fake_run(m, r, 0.1 * r) for m in MODES for r in range(3)]
    assert aggregate("x", 1, 1, list(MODES), runs) == aggregate("x", 1, 1, list(MODES), runs[::-1])


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    table = run_bench(load_case("leak"), runs=5, budget_execs=200, replay_budget=10, out=out)
    return out, table


def test_bench_table_shape(bench_dir):
    _, table = bench_dir
    validate_report(table, "bench_table")
    assert len(table["rows"]) == 15
    assert list(table["medians"]) == list(MODES)
    assert [(r["mode"], r["run"]) for r in table["rows"]] == [(m, r) for m in MODES for r in range(5)]
    text = format_table(table)
    assert len(text.splitlines()) == 2 + 15 + 3 + len(table["checks"])


def test_bench_reproducible_from_raw_artifacts(bench_dir):
    out, table = bench_dir
    assert aggregate_dir(out) == table


def test_bench_rejects_zero_runs():
    with pytest.raises(ValueError):
        run_bench(load_case("leak"), runs=0)
