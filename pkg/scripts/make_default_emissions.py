"""Regenerate src/decarbsim/data/emissions.json.

The bundled table is synthetic: per-bin rates come from a simple
power-based fuel model evaluated at each bin's representative (VSP, speed).
It keeps the ordering ICEV > e-fuel > HEV > BEV(=0) for tailpipe GHG and
can be replaced by real MOVES/GREET exports with the same schema.
"""

import math
import sys
from pathlib import Path

from decarbsim.emissions import MPH, SCHEMA_VERSION, default_opmode_bins, dump_emission_config

GHG_PER_KWH_FUEL = 262.0  # g CO2eq per kWh of gasoline (combustion, incl. CH4/N2O)

VSP = {
    "light": {
        "fossil": {"a": 0.156, "b": 0.002, "c": 0.00049, "mass": 1.48},
        "electric": {"a": 0.16, "b": 0.02, "c": 0.0069, "mass": 1.85},
    },
    "heavy": {
        "fossil": {"a": 1.2, "b": 0.0, "c": 0.0036, "mass": 15.0},
        "electric": {"a": 1.2, "b": 0.2, "c": 0.05, "mass": 16.5},
    },
}


def representative(b):
    lo, hi = b.vsp_range
    if math.isinf(lo) and math.isinf(hi):
        p = -6.0 if b.name == "braking" else 0.0
    elif math.isinf(lo):
        p = min(hi, 0.0) - 3.0 if hi <= 0 else hi / 2.0
    elif math.isinf(hi):
        p = lo + 6.0  # open-ended top bins collect the hard transients
    else:
        p = 0.5 * (lo + hi)
    slo, shi = b.speed_range
    v = 0.0 if b.name == "idle" else (slo + 5.0 if math.isinf(shi) else 0.5 * (slo + shi))
    return p, v


def fossil_fuel_kw(p_kw, idle_kw, eff, brake, psat=40.0):
    if brake:
        return 0.5 * idle_kw
    if p_kw <= 0:
        return 0.8 * idle_kw
    return idle_kw + p_kw / eff * (1.0 + p_kw / psat)


def nox_gps(p_kw):
    return 2e-4 + 1.2e-5 * max(p_kw, 0.0) ** 1.5


def main(out):
    bins = default_opmode_bins()
    mass_f = VSP["light"]["fossil"]["mass"]
    mass_e = VSP["light"]["electric"]["mass"]
    rates = {f: {} for f in ("ICEV", "HEV", "BEV", "EFUEL")}
    for b in bins:
        p, v = representative(b)
        brake = b.name == "braking"
        idle = b.name == "idle"
        pw = p * mass_f
        ice_kw = fossil_fuel_kw(pw, 4.5, 0.25, brake)
        if idle:
            ice_kw = 4.5
        assist = 0.7 if v < 25 * MPH else 0.9
        hev_kw = 0.0 if brake else (0.4 if idle else (0.2 if pw <= 0 else 0.4 + assist * pw / 0.30 * (1.0 + pw / 40.0)))
        pe = p * mass_e
        bev_kw = 0.6 if (idle or brake or pe <= 0) else 0.6 + pe / 0.85
        ice_nox = nox_gps(pw) if not brake else 1e-4
        rates["ICEV"][str(b.id)] = {"ghg": round(ice_kw / 3600 * GHG_PER_KWH_FUEL, 6),
                                    "nox": round(ice_nox, 7), "energy_kwh": round(ice_kw / 3600, 8)}
        rates["EFUEL"][str(b.id)] = {"ghg": round(0.97 * ice_kw / 3600 * GHG_PER_KWH_FUEL, 6),
                                     "nox": round(0.95 * ice_nox, 7), "energy_kwh": round(ice_kw / 3600, 8)}
        rates["HEV"][str(b.id)] = {"ghg": round(hev_kw / 3600 * GHG_PER_KWH_FUEL, 6),
                                   "nox": round(0.6 * ice_nox * (hev_kw / max(ice_kw, 1e-9)) if ice_kw else 0.0, 7),
                                   "energy_kwh": round(hev_kw / 3600, 8)}
        rates["BEV"][str(b.id)] = {"ghg": 0.0, "nox": 0.0, "energy_kwh": round(bev_kw / 3600, 8)}

    raw = {
        "schema_version": SCHEMA_VERSION,
        "notes": "Synthetic default table (power-based fuel model per opMode bin); replace with MOVES/GREET exports.",
        "vsp": VSP,
        "vsp_form": {"ICEV": "fossil", "HEV": "fossil", "EFUEL": "fossil", "BEV": "electric"},
        "opmode_bins": [
            {"id": b.id, "name": b.name,
             "vsp": [None if math.isinf(b.vsp_range[0]) else b.vsp_range[0],
                     None if math.isinf(b.vsp_range[1]) else b.vsp_range[1]],
             "speed": [None if math.isinf(b.speed_range[0]) else b.speed_range[0],
                       None if math.isinf(b.speed_range[1]) else b.speed_range[1]]}
            for b in bins
        ],
        "rates": rates,
        "heavy_multiplier": {"ghg": 3.5, "nox": 5.0, "energy_kwh": 3.5},
        "upstream": {
            "ICEV": {"unit": "L", "kwh_per_unit": 8.9, "ghg": 560.0, "nox": 0.6},
            "HEV": {"unit": "L", "kwh_per_unit": 8.9, "ghg": 560.0, "nox": 0.6},
            "EFUEL": {"unit": "L", "kwh_per_unit": 8.9, "ghg": 420.0, "nox": 0.8},
            "BEV": {"unit": "kWh", "kwh_per_unit": 1.0, "ghg": 290.0, "nox": 0.12},
        },
    }
    dump_emission_config(raw, out)


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "src/decarbsim/data/emissions.json")
