"""Generalized link costs, normalization, shortest paths and route strategies.

Groups: cost components and monetization, objective normalization,
shortest paths against brute force with tie rules, the UE, myopic and
anticipatory strategies, and the in-simulation strategy router.
"""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from conftest import two_route_graph
from decarbsim.demand import ODPair, VehicleSpec
from decarbsim import kernels as K
from decarbsim.dynamics import SimConfig, World, run_until_empty
from decarbsim.network import Link, LinkState, NetworkGraph, Node
from decarbsim.routing import (
    TT_ONLY,
    CostWeights,
    RoutingError,
    StrategyRouter,
    link_generalized_cost,
    network_costs,
    normalize_objectives,
    route_anticipatory,
    route_myopic,
    route_ue,
    shortest_path,
)

L = Link(1, 0, 1, 300.0, 1, 10.0)


def test_ghg_cost_is_rate_times_time():
    c = link_generalized_cost(L, (10.0, 2.0, 0.0), CostWeights())
    assert c.tt == 30.0 and c.ghg_cost == 60.0


def test_value_of_time_example():
    link = Link(2, 0, 1, 6000.0, 1, 10.0)
    w = CostWeights(beta_t=0.5 / 60.0, w_t=1.0, w_ghg=0.0, w_nox=0.0)
    assert link_generalized_cost(link, (10.0, 3.0, 1.0), w).generalized == pytest.approx(5.0, rel=1e-12)


def test_zero_betas_zero_cost():
    w = CostWeights(0.0, 0.0, 0.0)
    assert link_generalized_cost(L, LinkState(1, 0, 4.0, 10.0, 10.0, 3.0, 0.2), w).generalized == 0.0


def test_generalized_is_weighted_sum():
    w = CostWeights(0.01, 2e-4, 3e-3, 0.7, 1.3, 2.0)
    c = link_generalized_cost(L, {"speed": 6.0, "ghg_er": 1.7, "nox_er": 0.02}, w)
    expected = c.tt * 0.01 * 0.7 + c.ghg_cost * 2e-4 * 1.3 + c.nox_cost * 3e-3 * 2.0
    assert c.generalized == pytest.approx(expected, rel=1e-9)
    assert min(c.tt, c.ghg_cost, c.nox_cost, c.generalized) >= 0


def test_speed_floor_flags_clamp():
    c = link_generalized_cost(L, (0.0, 1.0, 0.0), CostWeights())
    assert c.clamped and c.tt == 600.0


def test_weight_validation():
    with pytest.raises(ValueError):
        CostWeights(w_t=0.0, w_ghg=0.0, w_nox=0.0)
    with pytest.raises(ValueError):
        CostWeights(beta_t=-1.0)


# -- normalization -------------------------------------------------------------------------------

def test_single_objective_ranking_unchanged():
    x = np.array([3.0, 1.0, 7.0, 2.0])
    np.testing.assert_array_equal(np.argsort(normalize_objectives(x)[:, 0]), np.argsort(x))


def test_means_rescaled_to_one():
    x = np.column_stack([[5.0, 15.0, 10.0], [500.0, 1500.0, 1000.0]])
    np.testing.assert_allclose(normalize_objectives(x).mean(axis=0), [1.0, 1.0])


def test_all_zero_objective_stays_zero():
    x = np.column_stack([[1.0, 2.0], [0.0, 0.0]])
    out = normalize_objectives(x)
    assert np.all(out[:, 1] == 0.0) and np.all(np.isfinite(out))


# -- shortest path ------------------------------------------------------------------------------

def _graph(n, edges):
    nodes = [Node(i) for i in range(n)]
    return NetworkGraph(nodes, [Link(k, a, b, 100.0, 1, 10.0) for k, (a, b) in enumerate(edges)])


def test_triangle():
    g = _graph(3, [(0, 1), (0, 2), (2, 1), (1, 0)])  # A=0, B=1, C=2
    r = shortest_path(g, np.array([5.0, 2.0, 2.0, 1.0]), 0, 1)
    assert r.links == (1, 2) and r.cost == 4.0


def test_zero_costs_pick_fewest_links():
    g = _graph(4, [(0, 1), (1, 2), (2, 3), (0, 3), (3, 0)])
    assert shortest_path(g, np.zeros(5), 0, 3).links == (3,)


def test_unreachable_raises():
    g = _graph(3, [(0, 1), (1, 0), (2, 0)])
    with pytest.raises(RoutingError, match="unreachable"):
        shortest_path(g, np.ones(3), 0, 2)


def test_negative_costs_rejected():
    g = _graph(2, [(0, 1), (1, 0)])
    with pytest.raises(RoutingError):
        shortest_path(g, np.array([-1.0, 1.0]), 0, 1)


def brute_force(n, edges, costs, o, d):
    """Best simple path by enumeration: cost, then link count, then link-id sequence."""
    best = None
    out = {u: [k for k, (a, _) in enumerate(edges) if a == u] for u in range(n)}

    def walk(u, seen, path, cost):
        nonlocal best
        if u == d:
            key = (cost, len(path), tuple(path))
            if best is None or key < best:
                best = key
            return
        for k in out[u]:
            v = edges[k][1]
            if v not in seen:
                walk(v, seen | {v}, path + [k], cost + costs[k])

    walk(o, {o}, [], 0.0)
    return best


def random_instance(rng):
    n = int(rng.integers(2, 11))
    pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    m = int(rng.integers(n, min(len(pairs), 3 * n) + 1))
    idx = rng.choice(len(pairs), size=m, replace=False)
    edges = [pairs[i] for i in sorted(idx)]
    used = {x for e in edges for x in e}
    edges += [(u, (u + 1) % n) for u in range(n) if u not in used]
    # integer costs make exact ties common, exercising the tie-break rules
    costs = rng.integers(0, 6, size=len(edges)).astype(float)
    return n, edges, costs


def test_matches_brute_force_on_random_graphs():
    rng = np.random.default_rng(2024)
    agree = checked = 0
    for _ in range(100):
        n, edges, costs = random_instance(rng)
        g = _graph(n, edges)
        o, d = (int(x) for x in rng.choice(n, 2, replace=False))
        ref = brute_force(n, edges, costs, o, d)
        checked += 1
        if ref is None:
            with pytest.raises(RoutingError):
                shortest_path(g, costs, o, d)
            agree += 1
            continue
        r = shortest_path(g, costs, o, d)
        agree += (r.cost, len(r.links), r.links) == ref
    assert agree == checked == 100


def test_argmin_invariant_under_beta_scaling():
    rng = np.random.default_rng(7)
    g = two_route_graph()
    for _ in range(20):
        speed = rng.uniform(1, 12, g.n_links)
        ghg, nox = rng.uniform(0, 3, g.n_links), rng.uniform(0, 0.05, g.n_links)
        w = CostWeights(w_t=1.0, w_ghg=1.0, w_nox=1.0)
        for normalize in (False, True):
            a = shortest_path(g, network_costs(g, speed, ghg, nox, w, normalize), 0, 3).links
            b = shortest_path(g, network_costs(g, speed, ghg, nox, w.scaled(37.5), normalize), 0, 3).links
            assert a == b


# -- strategies ------------------------------------------------------------------------------------

VEH = VehicleSpec(0, ODPair(0, 3, 1.0), 0.0)


def test_ue_free_flow_is_distance_over_ffs():
    g = two_route_graph()
    assert route_ue(VEH, g).links == shortest_path(g, g.length / g.ffs, 0, 3).links == (0, 1)


def test_ue_avoids_link_congested_at_entry():
    g = two_route_graph()
    states = [LinkState(0, 0, 1.0, 80.0, 288.0)]
    assert route_ue(VEH, g, states).links == (2, 3)


def test_myopic_equals_ue_under_tt_weights():
    g = two_route_graph()
    states = [LinkState(1, 0, 4.0, 50.0, 720.0, 1.0, 0.01)]
    assert route_myopic(VEH, g, states, TT_ONLY).links == route_ue(VEH, g, states).links


def test_myopic_diverts_around_blockage_from_next_node():
    g = NetworkGraph([Node(i) for i in range(5)], [
        Link(0, 0, 1, 300.0, 1, 12.0), Link(1, 1, 2, 300.0, 1, 12.0), Link(2, 2, 4, 300.0, 1, 12.0),
        Link(3, 1, 3, 350.0, 1, 12.0), Link(4, 3, 4, 350.0, 1, 12.0), Link(5, 4, 0, 300.0, 1, 12.0),
    ])
    veh = VehicleSpec(0, ODPair(0, 4, 1.0), 0.0)
    assert route_ue(veh, g).links == (0, 1, 2)
    blocked = [LinkState(2, 3, 0.0, 150.0, 0.0)]
    assert route_myopic(veh, g, blocked, from_node=1).links == (3, 4)


def test_anticipatory_with_current_forecast_equals_myopic():
    g = two_route_graph()
    now = {"speed": np.array([3.0, 12.0, 12.0, 12.0, 12.0, 12.0, 12.0]),
           "ghg_er": np.full(7, 1.0), "nox_er": np.full(7, 0.01)}
    w = CostWeights()
    assert route_anticipatory(VEH, g, now, w).links == route_myopic(VEH, g, now, w).links


def test_anticipatory_perfect_foresight_beats_myopic_ex_post():
    # route A is clear now but jams next interval; route B stays steady
    g = two_route_graph()
    current = {"speed": np.full(7, 12.0), "ghg_er": np.ones(7), "nox_er": np.zeros(7)}
    nxt = dict(current, speed=np.array([1.5, 1.5, 12.0, 12.0, 12.0, 12.0, 12.0]))
    m = route_myopic(VEH, g, current, TT_ONLY).links
    a = route_anticipatory(VEH, g, nxt, TT_ONLY).links
    realized = g.length / nxt["speed"]
    assert m == (0, 1) and a == (2, 3)
    assert realized[list(a)].sum() < realized[list(m)].sum()


def test_anticipatory_without_forecast_raises():
    with pytest.raises(RoutingError):
        route_anticipatory(VEH, two_route_graph(), None)


# -- simulation router --------------------------------------------------------------------------

def _sim(model, strategy, forecaster=None, n=40):
    g = two_route_graph()
    vs = [VehicleSpec(i, ODPair(0, 3, 1.0), float(3 * i), "CAV" if i % 2 else "HDV") for i in range(n)]
    router = StrategyRouter(strategy, CostWeights(), True, forecaster)
    w = World(g, vs, model, SimConfig(), router)
    run_until_empty(w)
    return w, router


def test_one_evaluation_per_cav_per_interval(emission_model):
    calls = []

    class Counting(StrategyRouter):
        def on_interval(self, world, interval):
            live = int(np.count_nonzero((world.cls == 2) & np.isin(world.status, (K.ACTIVE, K.WAITING))))
            before = self.evaluations
            super().on_interval(world, interval)
            calls.append((interval, live, self.evaluations - before))

    g = two_route_graph()
    vs = [VehicleSpec(i, ODPair(0, 3, 1.0), float(5 * i), "CAV") for i in range(30)]
    w = World(g, vs, emission_model, SimConfig(), Counting("M"))
    run_until_empty(w)
    assert [c[0] for c in calls] == list(range(len(calls)))
    assert all(live == done for _, live, done in calls)
    assert sum(done for *_, done in calls) > 0


def test_ue_routes_never_change(emission_model):
    w, r = _sim(emission_model, "UE")
    assert w.reroutes == 0 and r.evaluations == 0


def test_anticipatory_without_models_counts_fallbacks(emission_model):
    w, r = _sim(emission_model, "A", forecaster=lambda world, k: None)
    wm, _ = _sim(emission_model, "M")
    assert r.fallbacks > 0
    np.testing.assert_array_equal(w.arr_time, wm.arr_time)


def test_strategy_stack_deterministic(emission_model):
    a, _ = _sim(emission_model, "M")
    b, _ = _sim(emission_model, "M")
    np.testing.assert_array_equal(a.arr_time, b.arr_time)
    np.testing.assert_array_equal(a.route, b.route)


def test_unknown_strategy():
    with pytest.raises(ValueError):
        StrategyRouter("X")
