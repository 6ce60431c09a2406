"""Vehicle specific power, operating-mode binning and emission rates.

Tailpipe rates come from an (fuel, opMode) table held in ``emissions.json``;
upstream (well-to-tank) factors convert consumed energy into fuel-cycle
emissions. Both are replaceable data, the code only fixes the pipeline.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from ._jit import jit
from .demand import FUELS

SCHEMA_VERSION = 1
V_EPS = 0.1  # m/s, guard for the B/v term of the electric form
IDLE_SPEED = 0.44704  # 1 mph
BRAKE_ACCEL = -0.89408  # -2 mph/s
MPH = 0.44704

RATE_FIELDS = ("ghg", "nox", "energy_kwh")


class EmissionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VSPCoeffs:
    a_coef: float
    b_coef: float
    c_coef: float
    mass: float  # metric tons
    form: str = "fossil"  # or "electric"

    def __post_init__(self):
        if not self.mass > 0:
            raise EmissionConfigError("VSP mass must be positive")
        if self.form not in ("fossil", "electric"):
            raise EmissionConfigError(f"unknown VSP form {self.form!r}")


def vsp(v: float, a: float, c: VSPCoeffs) -> float:
    """Vehicle specific power in kW/ton."""
    if c.form == "fossil":
        return (c.a_coef * v + c.b_coef * v * v + c.c_coef * v ** 3 + c.mass * v * a) / c.mass
    if v < V_EPS:
        return 0.0
    return (c.a_coef * v + c.b_coef / v + c.c_coef * v * v + c.mass * v * a) / c.mass


@jit
def vsp_kernel(v, a, A, B, C, m, electric):
    """Array form of :func:`vsp`; every argument is a per-vehicle array."""
    n = v.shape[0]
    out = np.empty(n)
    for i in range(n):
        vi = v[i]
        if electric[i]:
            if vi < V_EPS:
                out[i] = 0.0
            else:
                out[i] = (A[i] * vi + B[i] / vi + C[i] * vi * vi + m[i] * vi * a[i]) / m[i]
        else:
            out[i] = (A[i] * vi + B[i] * vi * vi + C[i] * vi * vi * vi + m[i] * vi * a[i]) / m[i]
    return out


# -- operating modes ---------------------------------------------------------


@dataclass(frozen=True)
class OpModeBin:
    id: int
    vsp_range: tuple[float, float]  # kW/t, half-open [lo, hi)
    speed_range: tuple[float, float]  # m/s, half-open [lo, hi)
    name: str = ""

    def contains(self, p: float, v: float) -> bool:
        return self.vsp_range[0] <= p < self.vsp_range[1] and self.speed_range[0] <= v < self.speed_range[1]


def default_opmode_bins() -> list[OpModeBin]:
    """23 light-duty style bins: braking, idle, and three speed bands."""
    inf = math.inf
    bins = [
        OpModeBin(0, (-inf, inf), (IDLE_SPEED, inf), "braking"),
        OpModeBin(1, (-inf, inf), (0.0, IDLE_SPEED), "idle"),
    ]
    low = (IDLE_SPEED, 25 * MPH)
    mid = (25 * MPH, 50 * MPH)
    high = (50 * MPH, inf)
    for k, (lo, hi) in zip((11, 12, 13, 14, 15, 16), ((-inf, 0), (0, 3), (3, 6), (6, 9), (9, 12), (12, inf))):
        bins.append(OpModeBin(k, (lo, hi), low, f"low_{lo}_{hi}"))
    for k, (lo, hi) in zip(
        (21, 22, 23, 24, 25, 27, 28, 29, 30),
        ((-inf, 0), (0, 3), (3, 6), (6, 9), (9, 12), (12, 18), (18, 24), (24, 30), (30, inf)),
    ):
        bins.append(OpModeBin(k, (lo, hi), mid, f"mid_{lo}_{hi}"))
    for k, (lo, hi) in zip((33, 35, 37, 38, 39, 40), ((-inf, 6), (6, 12), (12, 18), (18, 24), (24, 30), (30, inf))):
        bins.append(OpModeBin(k, (lo, hi), high, f"high_{lo}_{hi}"))
    return bins


class BinTable:
    """Array view of a bin list; bin 0 is the braking bin when present."""

    def __init__(self, bins: list[OpModeBin], brake_id: int | None = 0, idle_id: int = 1):
        self.bins = list(bins)
        self.ids = np.array([b.id for b in bins], dtype=np.int64)
        self.vlo = np.array([b.vsp_range[0] for b in bins])
        self.vhi = np.array([b.vsp_range[1] for b in bins])
        self.slo = np.array([b.speed_range[0] for b in bins])
        self.shi = np.array([b.speed_range[1] for b in bins])
        self.position = {b.id: i for i, b in enumerate(bins)}
        if idle_id not in self.position:
            raise EmissionConfigError("bin table needs an idle bin")
        self.idle_pos = self.position[idle_id]
        self.brake_pos = self.position.get(brake_id, -1) if brake_id is not None else -1
        self._validate()

    def _validate(self):
        # every bin except braking takes part in the (vsp, speed) partition
        part = [i for i in range(len(self.bins)) if i != self.brake_pos]
        probes_v = np.concatenate([self.slo[part], [0.0, 1e3]])
        probes_p = np.concatenate([self.vlo[part][np.isfinite(self.vlo[part])], [-1e3, 0.0, 1e3]])
        for sv in probes_v:
            if not np.isfinite(sv):
                continue
            for p in probes_p:
                hits = [i for i in part if self.vlo[i] <= p < self.vhi[i] and self.slo[i] <= sv < self.shi[i]]
                if len(hits) != 1:
                    raise EmissionConfigError(f"opMode bins do not partition the plane at vsp={p}, v={sv}")


def opmode_classify(p: float, v: float, bins: BinTable | list[OpModeBin], accel: float | None = None) -> int:
    """Bin id for one (VSP, speed) sample.

    Braking (accel below -2 mph/s while moving) is only assigned when an
    acceleration is supplied; otherwise the (VSP, speed) partition decides.
    """
    table = bins if isinstance(bins, BinTable) else BinTable(bins)
    if v < IDLE_SPEED:
        return int(table.ids[table.idle_pos])
    if accel is not None and table.brake_pos >= 0 and accel <= BRAKE_ACCEL:
        return int(table.ids[table.brake_pos])
    for i in range(len(table.ids)):
        if i == table.brake_pos:
            continue
        if table.vlo[i] <= p < table.vhi[i] and table.slo[i] <= v < table.shi[i]:
            return int(table.ids[i])
    raise EmissionConfigError(f"no opMode bin for vsp={p}, v={v}")  # pragma: no cover - validated partition


@jit
def opmode_kernel(p, v, a, vlo, vhi, slo, shi, idle_pos, brake_pos):
    """Bin positions (not ids) for arrays of (vsp, speed, accel)."""
    n = p.shape[0]
    out = np.empty(n, dtype=np.int64)
    nb = vlo.shape[0]
    for i in range(n):
        if v[i] < IDLE_SPEED:
            out[i] = idle_pos
            continue
        if brake_pos >= 0 and a[i] <= BRAKE_ACCEL:
            out[i] = brake_pos
            continue
        out[i] = idle_pos
        for k in range(nb):
            if k == brake_pos:
                continue
            if vlo[k] <= p[i] < vhi[k] and slo[k] <= v[i] < shi[k]:
                out[i] = k
                break
    return out


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class UpstreamFactor:
    unit: str  # "L" or "kWh"
    kwh_per_unit: float
    ghg: float  # CO2eq g per unit
    nox: float  # g per unit


class EmissionModel:
    """Loaded ``emissions.json``: VSP coefficients, bins, rates, upstream factors."""

    def __init__(self, raw: dict):
        self.raw = raw
        _check_keys(raw, {"schema_version", "vsp", "vsp_form", "opmode_bins", "rates",
                          "heavy_multiplier", "upstream", "notes"}, "emissions config")
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise EmissionConfigError(f"unsupported schema_version {raw.get('schema_version')!r}")
        self.vsp_form = {f: raw["vsp_form"][f] for f in FUELS}
        self.coeffs: dict[tuple[str, str], VSPCoeffs] = {}
        for weight_class, forms in raw["vsp"].items():
            if weight_class not in ("light", "heavy"):
                raise EmissionConfigError(f"unknown vehicle weight class {weight_class!r}")
            for form, c in forms.items():
                _check_keys(c, {"a", "b", "c", "mass"}, f"vsp.{weight_class}.{form}")
                self.coeffs[(weight_class, form)] = VSPCoeffs(c["a"], c["b"], c["c"], c["mass"], form)
        bins = []
        for b in raw["opmode_bins"]:
            _check_keys(b, {"id", "name", "vsp", "speed"}, "opmode bin")
            bins.append(OpModeBin(int(b["id"]), _rng(b["vsp"]), _rng(b["speed"]), b.get("name", "")))
        self.bins = BinTable(bins)
        nb = len(bins)
        self.rates = np.zeros((len(FUELS), nb, 3))
        for fi, fuel in enumerate(FUELS):
            table = raw["rates"].get(fuel)
            if table is None:
                raise EmissionConfigError(f"rate table missing fuel {fuel}")
            for b in bins:
                entry = table.get(str(b.id))
                if entry is None:
                    raise EmissionConfigError(f"rate table missing ({fuel}, opMode {b.id})")
                _check_keys(entry, set(RATE_FIELDS), f"rates.{fuel}.{b.id}")
                vals = [float(entry[k]) for k in RATE_FIELDS]
                if min(vals) < 0:
                    raise EmissionConfigError(f"negative rate for ({fuel}, opMode {b.id})")
                self.rates[fi, self.bins.position[b.id]] = vals
        bev = FUELS.index("BEV")
        if np.any(self.rates[bev, :, :2] != 0):
            raise EmissionConfigError("BEV tailpipe GHG and NOx must be zero")
        hm = raw.get("heavy_multiplier", {})
        self.heavy_multiplier = np.array([float(hm.get(k, 1.0)) for k in RATE_FIELDS])
        self.upstream: dict[str, UpstreamFactor] = {}
        for fuel in FUELS:
            u = raw["upstream"].get(fuel)
            if u is None:
                raise EmissionConfigError(f"upstream factors missing fuel {fuel}")
            _check_keys(u, {"unit", "kwh_per_unit", "ghg", "nox"}, f"upstream.{fuel}")
            f = UpstreamFactor(u["unit"], float(u["kwh_per_unit"]), float(u["ghg"]), float(u["nox"]))
            if min(f.kwh_per_unit, f.ghg, f.nox) < 0 or f.kwh_per_unit == 0:
                raise EmissionConfigError(f"invalid upstream factors for {fuel}")
            self.upstream[fuel] = f

    def coeffs_for(self, fuel: str, heavy: bool = False) -> VSPCoeffs:
        return self.coeffs[("heavy" if heavy else "light", self.vsp_form[fuel])]

    def upstream_arrays(self):
        """Per-fuel (ghg per kWh, nox per kWh) in FUELS order."""
        g = np.array([self.upstream[f].ghg / self.upstream[f].kwh_per_unit for f in FUELS])
        n = np.array([self.upstream[f].nox / self.upstream[f].kwh_per_unit for f in FUELS])
        return g, n


def _rng(pair) -> tuple[float, float]:
    lo, hi = pair
    return (-math.inf if lo is None else float(lo), math.inf if hi is None else float(hi))


def _check_keys(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise EmissionConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def default_emission_path() -> Path:
    return Path(str(resources.files("decarbsim") / "data" / "emissions.json"))


def load_emission_config(path: str | os.PathLike | None = None) -> EmissionModel:
    path = default_emission_path() if path is None else Path(path)
    with open(path, encoding="utf-8") as fh:
        return EmissionModel(json.load(fh))


# -- rates -------------------------------------------------------------------


def tailpipe_rates(vehicle, v: float, a: float, model: EmissionModel) -> dict[str, float]:
    """Per-second tailpipe GHG (g/s), NOx (g/s) and energy (kWh/s)."""
    c = model.coeffs_for(vehicle.fuel, vehicle.heavy)
    p = vsp(v, a, c)
    bid = opmode_classify(p, v, model.bins, accel=a)
    row = model.rates[FUELS.index(vehicle.fuel), model.bins.position[bid]].copy()
    if vehicle.heavy:
        row = row * model.heavy_multiplier
    return {"ghg": float(row[0]), "nox": float(row[1]), "energy_kwh": float(row[2]), "opmode": bid, "vsp": p}


class FleetEmissionParams:
    """Per-vehicle arrays used by the simulation's emission kernel."""

    def __init__(self, model: EmissionModel, fuels, heavy):
        fuels = list(fuels)
        heavy = np.asarray(heavy, dtype=bool)
        n = len(fuels)
        self.fuel_idx = np.array([FUELS.index(f) for f in fuels], dtype=np.int64)
        self.A = np.empty(n)
        self.B = np.empty(n)
        self.C = np.empty(n)
        self.m = np.empty(n)
        self.electric = np.zeros(n, dtype=np.bool_)
        for i, (f, h) in enumerate(zip(fuels, heavy)):
            c = model.coeffs_for(f, bool(h))
            self.A[i], self.B[i], self.C[i], self.m[i] = c.a_coef, c.b_coef, c.c_coef, c.mass
            self.electric[i] = c.form == "electric"
        self.scale = np.where(heavy[:, None], model.heavy_multiplier[None, :], 1.0)
        self.model = model


@jit
def _lookup_kernel(pos, fuel_idx, rates, scale, active, out):
    for i in range(pos.shape[0]):
        if active[i]:
            for k in range(3):
                out[i, k] = rates[fuel_idx[i], pos[i], k] * scale[i, k]
        else:
            for k in range(3):
                out[i, k] = 0.0


def fleet_rates(params: FleetEmissionParams, v: np.ndarray, a: np.ndarray, active: np.ndarray) -> np.ndarray:
    """(n, 3) array of per-second ghg, nox, energy for each vehicle."""
    b = params.model.bins
    p = vsp_kernel(v, a, params.A, params.B, params.C, params.m, params.electric)
    pos = opmode_kernel(p, v, a, b.vlo, b.vhi, b.slo, b.shi, b.idle_pos, b.brake_pos)
    out = np.empty((len(v), 3))
    _lookup_kernel(pos, params.fuel_idx, params.model.rates, params.scale, active, out)
    return out


def link_space_mean_er(per_second, occupied=None) -> float:
    """Interval emission rate weighting later seconds linearly more.

    Weights are ``k / sum(k)`` for k = 1..n. Seconds flagged unoccupied are
    dropped and the remaining weights renormalised; an empty interval is 0.
    """
    x = np.asarray(per_second, dtype=np.float64)
    if x.size == 0:
        return 0.0
    w = np.arange(1, x.size + 1, dtype=np.float64)
    if occupied is not None:
        w = w * np.asarray(occupied, dtype=bool)
    tot = w.sum()
    return float((w * x).sum() / tot) if tot > 0 else 0.0


def link_space_mean_er_batch(per_second: np.ndarray, occupied: np.ndarray) -> np.ndarray:
    """Row-wise :func:`link_space_mean_er` for (links, seconds) arrays."""
    w = np.arange(1, per_second.shape[1] + 1, dtype=np.float64)[None, :] * occupied
    tot = w.sum(axis=1)
    return np.where(tot > 0, (w * per_second).sum(axis=1) / np.where(tot > 0, tot, 1.0), 0.0)


def wtw_totals(tailpipe_ghg_g, tailpipe_nox_g, energy_kwh, fuels, model: EmissionModel) -> dict[str, float]:
    """Fleet well-to-wheel totals in kg from per-vehicle tailpipe and energy sums."""
    fuels = list(fuels)
    energy = np.asarray(energy_kwh, dtype=np.float64)
    up_ghg = 0.0
    up_nox = 0.0
    for i, f in enumerate(fuels):
        u = model.upstream[f]
        units = energy[i] / u.kwh_per_unit
        up_ghg += units * u.ghg
        up_nox += units * u.nox
    tg = float(np.sum(tailpipe_ghg_g))
    tn = float(np.sum(tailpipe_nox_g))
    return {
        "tailpipe_ghg_kg": tg / 1000.0,
        "upstream_ghg_kg": up_ghg / 1000.0,
        "wtw_ghg_kg": (tg + up_ghg) / 1000.0,
        "tailpipe_nox_kg": tn / 1000.0,
        "upstream_nox_kg": up_nox / 1000.0,
        "wtw_nox_kg": (tn + up_nox) / 1000.0,
    }


def dump_emission_config(raw: dict, path: str | os.PathLike) -> None:
    EmissionModel(raw)  # validate before writing
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(raw, fh, indent=1, sort_keys=False)
        fh.write("\n")
