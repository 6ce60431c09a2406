"""Trip generation and fleet apportionment.

Groups: OD validation, vehicle generation (determinism, multinomial
counts, reachability), largest-remainder apportionment and class/fuel
assignment.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import write_network
from decarbsim.demand import (
    MIXES,
    DemandError,
    FleetMix,
    ODPair,
    apportion,
    assign_fuel_and_class,
    generate_vehicles,
    get_mix,
    load_od,
    save_od,
    synthetic_od,
)
from decarbsim.network import grid_network, load_network
from decarbsim.routing import shortest_path
from decarbsim.scenario import load_config


def test_od_pair_rejects_loops_and_negative_rates():
    with pytest.raises(DemandError):
        ODPair(3, 3, 1.0)
    with pytest.raises(DemandError):
        ODPair(1, 2, -1.0)


def test_mix_table_has_fourteen_valid_mixes():
    assert len(MIXES) == 14
    for m in MIXES.values():
        assert sum(m.shares().values()) == pytest.approx(1.0, abs=1e-9)


def test_mix_shares_must_sum_to_one():
    with pytest.raises(DemandError):
        FleetMix(0.5, 0.4, 0.0, 0.0)
    assert get_mix({"icev": 0.5, "bev": 0.5}).shares()["BEV"] == 0.5
    with pytest.raises(DemandError):
        get_mix("I10B90")


def test_od_csv_round_trip(tmp_path):
    od = [ODPair(0, 5, 1.5), ODPair(3, 2, 0.25)]
    save_od(od, tmp_path / "od.csv")
    assert load_od(tmp_path / "od.csv") == od


# -- generation ----------------------------------------------------------------

OD2 = [ODPair(0, 15, 3.0), ODPair(12, 3, 1.0)]


def test_zero_demand():
    assert generate_vehicles(OD2, 0, seed=1) == []


def test_generation_deterministic():
    od = [ODPair(0, 15, 1.0)]
    assert generate_vehicles(od, 100, seed=7) == generate_vehicles(od, 100, seed=7)
    assert generate_vehicles(od, 100, seed=7) != generate_vehicles(od, 100, seed=8)


def test_multinomial_counts_within_three_sigma():
    vs = generate_vehicles(OD2, 4000, seed=3)
    n_a = sum(v.od == OD2[0] for v in vs)
    sigma = np.sqrt(4000 * 0.75 * 0.25)
    assert abs(n_a - 3000) < 3 * sigma


def test_departures_inside_window_in_id_order():
    vs = generate_vehicles(OD2, 500, window=900, seed=5)
    t = np.array([v.departure_time for v in vs])
    assert t.min() >= 0 and t.max() < 900
    assert np.all(np.diff(t) >= 0)
    assert [v.id for v in vs] == list(range(500))


def test_unreachable_pair_named(tmp_path):
    d = write_network(tmp_path / "chain", [1, 2, 3], [(0, 1, 2, 100.0, 1, 10.0), (1, 2, 3, 100.0, 1, 10.0)])
    g = load_network(d)
    with pytest.raises(DemandError, match="unreachable OD pair 3->1"):
        generate_vehicles([ODPair(1, 3, 1.0), ODPair(3, 1, 1.0)], 10, graph=g)


def test_bundled_od_pairs_all_routable():
    cfg = load_config()
    g = load_network(cfg.network_dir())
    for od in load_od(cfg.od_path()):
        r = shortest_path(g, g.free_flow_times(), od.origin, od.destination)
        assert np.isfinite(r.cost) and len(r) > 0


def test_synthetic_od_is_seeded():
    g = grid_network(10)
    assert synthetic_od(g, seed=4) == synthetic_od(g, seed=4)
    assert len(synthetic_od(g, seed=4, n_pairs=30)) == 30


# -- apportionment -------------------------------------------------------------------

def _fleet(n):
    return generate_vehicles([ODPair(0, 15, 1.0)], n, seed=0)


def _fuel_counts(vs):
    out = {}
    for v in vs:
        out[v.fuel] = out.get(v.fuel, 0) + 1
    return out


def test_equal_shares_exact():
    vs = assign_fuel_and_class(_fleet(1000), MIXES["ES"], 0.0, seed=2)
    assert _fuel_counts(vs) == {"ICEV": 250, "HEV": 250, "BEV": 250, "EFUEL": 250}


def test_zero_mpr_all_hdv():
    vs = assign_fuel_and_class(_fleet(200), MIXES["I100"], 0.0, seed=2)
    assert {v.cls for v in vs} == {"HDV"}


def test_i75e25_over_ten():
    vs = assign_fuel_and_class(_fleet(10), MIXES["I75E25"], 0.0)
    assert _fuel_counts(vs) == {"ICEV": 8, "EFUEL": 2}


def test_equal_remainder_tie_uses_fuel_order():
    # equal shares and equal remainders: the earlier fuel in BEV < EFUEL < HEV < ICEV wins
    assert apportion({"ICEV": 0.5, "BEV": 0.5}, 3) == {"BEV": 2, "ICEV": 1}


def test_half_cav_share():
    vs = assign_fuel_and_class(_fleet(101), MIXES["I100"], 0.5, seed=1)
    assert sum(v.cls == "CAV" for v in vs) in (50, 51)
    assert sum(v.cls == "HDV" for v in vs) + sum(v.cls == "CAV" for v in vs) == 101


def test_non_canonical_mpr_flagged():
    with pytest.warns(UserWarning, match="non-canonical"):
        assign_fuel_and_class(_fleet(10), MIXES["I100"], 0.3)


def test_bev_sets_nest_across_mixes():
    fleet = _fleet(400)
    b25 = {v.id for v in assign_fuel_and_class(fleet, MIXES["I75B25"], 0.0, seed=9) if v.fuel == "BEV"}
    b50 = {v.id for v in assign_fuel_and_class(fleet, MIXES["I50B50"], 0.0, seed=9) if v.fuel == "BEV"}
    assert b25 < b50


def test_assignment_deterministic():
    fleet = _fleet(300)
    a = assign_fuel_and_class(fleet, MIXES["ES"], 0.5, seed=4, heavy_share=0.05)
    assert a == assign_fuel_and_class(fleet, MIXES["ES"], 0.5, seed=4, heavy_share=0.05)
    assert sum(v.heavy for v in a) == 15


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=4, max_size=4).filter(lambda w: sum(w) > 0),
       st.integers(0, 5000))
def test_largest_remainder_property(weights, n):
    shares = dict(zip(("ICEV", "HEV", "BEV", "EFUEL"), np.array(weights) / sum(weights)))
    counts = apportion(shares, n)
    assert sum(counts.values()) == n
    for k, s in shares.items():
        assert abs(counts[k] - s * n) < 1
