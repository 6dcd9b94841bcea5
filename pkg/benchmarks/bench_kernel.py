"""Compare the numba kernels against the pure-numpy fallback.

Each backend runs in its own subprocess because the backend is chosen at
import time from THREADFUZZ_DISABLE_JIT. Timings exclude JIT compilation
(one warm-up call per kernel).

    python benchmarks/bench_kernel.py [--execs N] [--maps N] [--json]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def measure(execs: int, maps: int) -> dict:
    import numpy as np

    from threadfuzz._jit import backend_name
    from threadfuzz.analysis import build_plan
    from threadfuzz.bench import load_case
    from threadfuzz.executor import MAP_SIZE, Machine, coverage_digest, new_virgin_map, update_virgin

    out = {"backend": backend_name()}
    for name, data in (("fig1", b"M\x10"), ("gate", b"G\x02\x04\x06\x11\x22\x33\x44"), ("crash", b"C\x0c")):
        program = load_case(name).program()
        m = Machine(program, build_plan(program, "muzz", 0))
        m.run_raw(data, 0, 20_000, True, False)
        t0 = time.perf_counter()
        steps = 0
        for s in range(execs):
            m.run_raw(data, s, 20_000, True, False)
            steps += m.summary().steps
        dt = time.perf_counter() - t0
        out[f"exec_{name}"] = {"seconds": dt, "execs_per_s": execs / dt, "steps_per_s": steps / dt}

    rng = np.random.default_rng(0)
    cov = [np.where(rng.random(MAP_SIZE) < 0.02, rng.integers(1, 256, MAP_SIZE), 0).astype(np.uint8)
           for _ in range(maps)]
    virgin = new_virgin_map()
    update_virgin(cov[0], virgin)
    coverage_digest(cov[0])
    t0 = time.perf_counter()
    for c in cov:
        update_virgin(c, virgin)
    dt = time.perf_counter() - t0
    out["update_virgin"] = {"seconds": dt, "maps_per_s": maps / dt}
    t0 = time.perf_counter()
    for c in cov:
        coverage_digest(c)
    dt = time.perf_counter() - t0
    out["coverage_digest"] = {"seconds": dt, "maps_per_s": maps / dt}
    return out


def run_backend(disable_jit: bool, execs: int, maps: int) -> dict:
    env = dict(os.environ, THREADFUZZ_DISABLE_JIT="1" if disable_jit else "0")
    cmd = [sys.executable, __file__, "--worker", "--execs", str(execs), "--maps", str(maps)]
    proc = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--execs", type=int, default=200, help="executions per program")
    ap.add_argument("--maps", type=int, default=200, help="coverage maps per bitmap kernel")
    ap.add_argument("--json", action="store_true")
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        print(json.dumps(measure(args.execs, args.maps)))
        return

    fast = run_backend(False, args.execs, args.maps)
    slow = run_backend(True, args.execs, args.maps)
    if args.json:
        print(json.dumps({"numba": fast, "fallback": slow}, indent=2))
        return
    print(f"{'kernel':<18}{'numba':>14}{'fallback':>14}{'speedup':>10}")
    for key in fast:
        if key == "backend":
            continue
        rate = next(k for k in fast[key] if k.endswith("_per_s") and not k.startswith("steps"))
        a, b = fast[key][rate], slow[key][rate]
        print(f"{key:<18}{a:>12.0f}/s{b:>12.0f}/s{a / b:>9.1f}x")


if __name__ == "__main__":
    main()
