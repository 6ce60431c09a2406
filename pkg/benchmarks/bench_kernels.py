"""Compiled (numba) vs plain numpy/Python kernels.

Each backend runs in its own interpreter because the switch is read at
import time. Workloads: all-destination next-hop tables on the bundled
grid, and one short simulation replication. Outputs from both backends are
compared as well as timed.

    python benchmarks/bench_kernels.py [--vehicles 400] [--repeat 3]
"""

from __future__ import annotations

import argparse
import json
import math
import os
import subprocess
import sys
import time


def worker(vehicles: int, repeat: int) -> dict:
    import numpy as np

    from decarbsim._jit import backend
    from decarbsim.routing import NextHopTable
    from decarbsim.scenario import Scenario, Workspace, load_config

    ws = Workspace(load_config(overrides={"demand": {"total": vehicles, "window_s": 300}}))
    g = ws.graph
    costs = g.length / g.ffs
    out = {"backend": backend()}

    # first call pays for compilation (or loads the on-disk cache)
    t0 = time.perf_counter()
    NextHopTable(g, costs).prepare(range(g.n_nodes))
    out["routing_first_s"] = time.perf_counter() - t0
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        tab = NextHopTable(g, costs)
        tab.prepare(range(g.n_nodes))
        best = min(best, time.perf_counter() - t0)
    out["routing_s"] = best
    out["routing_digest"] = float(sum(tab.cost(0, d) for d in range(g.n_nodes)))

    sc = Scenario(0.0, "UE", "ED", "I100", 1, 0)
    ws.run_replication(sc, 0)  # warm-up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        rep = ws.run_replication(sc, 0)
        best = min(best, time.perf_counter() - t0)
    out["sim_s"] = best
    out["sim_metrics"] = {k: rep.metrics[k] for k in ("wtw_ghg_kg", "mean_tt_min", "fleet_km", "braking_energy_mj")}
    out["sim_metrics"]["gridlock"] = rep.gridlock
    np.seterr(all="ignore")
    return out


def run_backend(disable: bool, vehicles: int, repeat: int) -> dict:
    env = dict(os.environ)
    if disable:
        env["DECARBSIM_DISABLE_NUMBA"] = "1"
    else:
        env.pop("DECARBSIM_DISABLE_NUMBA", None)
    cmd = [sys.executable, __file__, "--worker", "--vehicles", str(vehicles), "--repeat", str(repeat)]
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--vehicles", type=int, default=400)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.worker:
        print(json.dumps(worker(args.vehicles, args.repeat)))
        return 0

    fast = run_backend(False, args.vehicles, args.repeat)
    slow = run_backend(True, args.vehicles, args.repeat)
    print(f"{'workload':<34}{fast['backend']:>12}{slow['backend']:>12}{'speedup':>10}")
    for key, name in (("routing_s", "next-hop tables, all 100 dests"),
                      ("sim_s", f"replication, {args.vehicles} vehicles")):
        print(f"{name:<34}{fast[key]:>11.4f}s{slow[key]:>11.4f}s{slow[key] / fast[key]:>9.1f}x")
    print(f"{'first routing call (compile/load)':<34}{fast['routing_first_s']:>11.4f}s{slow['routing_first_s']:>11.4f}s")
    # compiled code may contract multiply-adds, so compare to a relative tolerance
    same_route = math.isclose(fast["routing_digest"], slow["routing_digest"], rel_tol=1e-12)
    same_sim = all(math.isclose(fast["sim_metrics"][k], slow["sim_metrics"][k], rel_tol=1e-9)
                   for k in fast["sim_metrics"])
    print(f"outputs agree (1e-9 relative): routing {same_route}, simulation {same_sim}")
    if not same_sim:
        for k in fast["sim_metrics"]:
            print(f"  {k}: {fast['sim_metrics'][k]!r} vs {slow['sim_metrics'][k]!r}")
    return 0 if same_route and same_sim else 1


if __name__ == "__main__":
    sys.exit(main())
