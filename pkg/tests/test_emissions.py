"""VSP, operating-mode bins, rate lookup, link emission rates and WTW totals.

Groups: VSP oracle values and guards, bin partition and boundaries, rate
lookup by fuel, config validation, link-rate weighting, upstream totals,
and simulation-level accounting and ordering.
"""

from __future__ import annotations

import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decarbsim.demand import ODPair, VehicleSpec, assign_fuel_and_class, generate_vehicles, get_mix
from decarbsim.dynamics import SimConfig, World, run_until_empty
from decarbsim.emissions import (
    IDLE_SPEED,
    BinTable,
    EmissionConfigError,
    EmissionModel,
    FleetEmissionParams,
    OpModeBin,
    VSPCoeffs,
    default_opmode_bins,
    fleet_rates,
    link_space_mean_er,
    opmode_classify,
    tailpipe_rates,
    vsp,
    wtw_totals,
)
from decarbsim.network import grid_network

FOSSIL = VSPCoeffs(0.15, 0.002, 0.0005, 1.5, "fossil")
ELECTRIC = VSPCoeffs(0.16, 0.02, 0.0069, 1.85, "electric")


def _car(fuel, heavy=False):
    return VehicleSpec(0, ODPair(0, 1, 1.0), 0.0, "HDV", fuel, heavy)


def test_fossil_vsp_zero_at_standstill():
    assert vsp(0.0, 2.0, FOSSIL) == 0.0


def test_fossil_vsp_oracle():
    assert vsp(10.0, 0.5, FOSSIL) == pytest.approx((1.5 + 0.2 + 0.5 + 7.5) / 1.5, rel=1e-12)
    assert vsp(10.0, 0.5, FOSSIL) == pytest.approx(6.4667, abs=1e-4)


def test_electric_vsp_guard():
    assert vsp(0.05, 1.0, ELECTRIC) == 0.0
    v = 5.0
    expected = (0.16 * v + 0.02 / v + 0.0069 * v * v + 1.85 * v * 0.3) / 1.85
    assert vsp(v, 0.3, ELECTRIC) == pytest.approx(expected, rel=1e-12)


def test_vsp_linear_in_acceleration():
    for c in (FOSSIL, ELECTRIC):
        a = np.linspace(-3, 3, 13)
        p = np.array([vsp(8.0, x, c) for x in a])
        np.testing.assert_allclose(np.diff(p, 2), 0.0, atol=1e-12)


def test_vsp_continuous_above_guard():
    v = np.linspace(0.1, 40.0, 20001)
    p = np.array([vsp(x, 0.2, ELECTRIC) for x in v])
    assert np.max(np.abs(np.diff(p))) < 0.05


def test_bad_coefficients_rejected():
    with pytest.raises(EmissionConfigError):
        VSPCoeffs(0.1, 0.1, 0.1, 0.0)
    with pytest.raises(EmissionConfigError):
        VSPCoeffs(0.1, 0.1, 0.1, 1.0, "diesel")


# -- bins ----------------------------------------------------------------------------------

BINS = BinTable(default_opmode_bins())


def test_default_bins_count():
    assert len(default_opmode_bins()) == 23


def test_standstill_is_idle():
    assert opmode_classify(0.0, 0.0, BINS) == 1
    assert opmode_classify(5.0, IDLE_SPEED / 2, BINS, accel=-3.0) == 1


def test_boundary_goes_to_upper_half_open_bin():
    v = 5.0  # low-speed band
    assert opmode_classify(3.0, v, BINS) == 13  # [3, 6)
    assert opmode_classify(3.0 - 1e-12, v, BINS) == 12  # [0, 3)


def test_braking_needs_acceleration():
    assert opmode_classify(-2.0, 10.0, BINS, accel=-1.0) == 0
    assert opmode_classify(-2.0, 10.0, BINS) == 11


def test_sample_grid_partition():
    ps = np.linspace(-40, 60, 100)
    vs = np.linspace(0, 40, 100)
    part = [b for b in default_opmode_bins() if b.name != "braking"]
    for p in ps:
        for v in vs:
            hits = [b.id for b in part if b.contains(p, v)]
            assert len(hits) == 1
            assert opmode_classify(p, v, BINS) == hits[0]


def test_overlapping_bins_rejected():
    bins = default_opmode_bins() + [OpModeBin(99, (0.0, 1.0), (IDLE_SPEED, 5.0))]
    with pytest.raises(EmissionConfigError, match="partition"):
        BinTable(bins)


# -- rates -----------------------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 35.0), st.floats(-4.0, 3.0))
def test_bev_tailpipe_zero(emission_model, v, a):
    r = tailpipe_rates(_car("BEV"), v, a, emission_model)
    assert r["ghg"] == 0.0 and r["nox"] == 0.0
    assert r["energy_kwh"] > 0.0


def test_efuel_shares_icev_energy_model(emission_model):
    for v, a in [(0.0, 0.0), (5.0, 1.0), (12.0, -0.2), (20.0, 0.4), (30.0, -1.5)]:
        i = tailpipe_rates(_car("ICEV"), v, a, emission_model)
        e = tailpipe_rates(_car("EFUEL"), v, a, emission_model)
        assert i["opmode"] == e["opmode"] and i["energy_kwh"] == e["energy_kwh"]
        assert i["ghg"] != e["ghg"]


def test_icev_idle_is_table_lookup(emission_model):
    r = tailpipe_rates(_car("ICEV"), 0.0, 0.0, emission_model)
    entry = emission_model.raw["rates"]["ICEV"]["1"]
    assert (r["ghg"], r["nox"], r["energy_kwh"]) == (entry["ghg"], entry["nox"], entry["energy_kwh"])


def test_ghg_ordering_by_fuel(emission_model):
    for v, a in [(0.0, 0.0), (6.0, 0.5), (14.0, 0.0), (25.0, 0.3)]:
        g = {f: tailpipe_rates(_car(f), v, a, emission_model)["ghg"] for f in ("ICEV", "EFUEL", "HEV", "BEV")}
        assert g["ICEV"] > g["EFUEL"] > g["HEV"] > g["BEV"] == 0.0


def test_heavy_multiplier(emission_model):
    light = tailpipe_rates(_car("ICEV"), 0.0, 0.0, emission_model)
    heavy = tailpipe_rates(_car("ICEV", heavy=True), 0.0, 0.0, emission_model)
    assert heavy["ghg"] == pytest.approx(light["ghg"] * emission_model.heavy_multiplier[0])


def test_fleet_kernel_matches_scalar(emission_model):
    rng = np.random.default_rng(0)
    fuels = list(rng.choice(["ICEV", "HEV", "BEV", "EFUEL"], 300))
    heavy = rng.random(300) < 0.1
    v = rng.uniform(0, 30, 300) * (rng.random(300) > 0.1)
    a = rng.uniform(-3, 2, 300)
    out = fleet_rates(FleetEmissionParams(emission_model, fuels, heavy), v, a, np.ones(300, dtype=bool))
    for i in range(300):
        r = tailpipe_rates(_car(fuels[i], bool(heavy[i])), v[i], a[i], emission_model)
        np.testing.assert_allclose(out[i], [r["ghg"], r["nox"], r["energy_kwh"]], rtol=1e-12)


def test_missing_rate_entry_fails_at_load(emission_model):
    raw = copy.deepcopy(emission_model.raw)
    del raw["rates"]["HEV"]["22"]
    with pytest.raises(EmissionConfigError, match=r"missing \(HEV, opMode 22\)"):
        EmissionModel(raw)


def test_unknown_key_rejected(emission_model):
    raw = copy.deepcopy(emission_model.raw)
    raw["colour"] = "green"
    with pytest.raises(EmissionConfigError, match="unknown keys"):
        EmissionModel(raw)


def test_bev_tailpipe_must_be_zero(emission_model):
    raw = copy.deepcopy(emission_model.raw)
    raw["rates"]["BEV"]["1"]["ghg"] = 0.1
    with pytest.raises(EmissionConfigError, match="BEV"):
        EmissionModel(raw)


def test_every_fuel_bin_pair_present(emission_model):
    for fuel, table in emission_model.raw["rates"].items():
        assert {str(b.id) for b in default_opmode_bins()} <= set(table)


# -- link rates ---------------------------------------------------------------------------------

def test_constant_series_rate():
    assert link_space_mean_er(np.full(60, 2.0)) == pytest.approx(2.0, rel=1e-12)


def test_late_spike_weight():
    x = np.zeros(60)
    x[-1] = 61.0
    assert link_space_mean_er(x) == pytest.approx(61.0 * 60.0 / 1830.0, rel=1e-12)
    assert link_space_mean_er(x) == pytest.approx(2.0, rel=1e-12)


def test_empty_interval_rate_zero():
    assert link_space_mean_er(np.zeros(60)) == 0.0
    assert link_space_mean_er([]) == 0.0


# -- WTW ----------------------------------------------------------------------------------------

def test_bev_upstream_multiplication(emission_model):
    raw = copy.deepcopy(emission_model.raw)
    raw["upstream"]["BEV"]["ghg"] = 100.0
    m = EmissionModel(raw)
    t = wtw_totals([0.0], [0.0], [2.0], ["BEV"], m)
    assert t["upstream_ghg_kg"] == pytest.approx(0.2)
    assert t["tailpipe_ghg_kg"] == 0.0 and t["wtw_ghg_kg"] == pytest.approx(0.2)


def test_zero_upstream_factors(emission_model):
    raw = copy.deepcopy(emission_model.raw)
    for u in raw["upstream"].values():
        u["ghg"] = u["nox"] = 0.0
    t = wtw_totals([1500.0, 900.0], [3.0, 1.0], [4.0, 3.0], ["ICEV", "HEV"], EmissionModel(raw))
    assert t["wtw_ghg_kg"] == t["tailpipe_ghg_kg"] == 2.4
    assert t["wtw_nox_kg"] == t["tailpipe_nox_kg"]


def _fleet_world(model, mix, seed=1):
    g = grid_network(5)
    od = [ODPair(0, 24, 1.0), ODPair(20, 4, 1.0), ODPair(2, 22, 1.0), ODPair(14, 10, 1.0)]
    vs = assign_fuel_and_class(generate_vehicles(od, 200, 300.0, seed, g), get_mix(mix), 0.0, seed=seed)
    return World(g, vs, model, SimConfig(seed=seed))


def test_all_bev_fleet_is_upstream_only(emission_model):
    w = _fleet_world(emission_model, "B100")
    run_until_empty(w)
    t = wtw_totals(w.ghg, w.nox, w.energy, w.fuels, emission_model)
    assert t["tailpipe_ghg_kg"] == 0.0 and t["tailpipe_nox_kg"] == 0.0
    assert t["wtw_ghg_kg"] == t["upstream_ghg_kg"] > 0.0


def test_link_totals_equal_vehicle_totals(emission_model):
    w = _fleet_world(emission_model, "ES")
    run_until_empty(w)
    link = w.link_em_total.sum(axis=0)
    assert link[0] == pytest.approx(w.ghg.sum(), rel=1e-6)
    assert link[1] == pytest.approx(w.nox.sum(), rel=1e-6)


def test_wtw_monotone_in_bev_share(emission_model):
    wtw = []
    for mix in ("I100", "I75B25", "I50B50", "I25B75", "B100"):
        w = _fleet_world(emission_model, mix)
        run_until_empty(w)
        wtw.append(wtw_totals(w.ghg, w.nox, w.energy, w.fuels, emission_model)["wtw_ghg_kg"])
    assert all(a >= b for a, b in zip(wtw, wtw[1:]))
    assert not math.isclose(wtw[0], wtw[-1])
