"""Synthetic OD demand, departure times, and fleet composition."""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .network import NetworkGraph

FUELS = ("ICEV", "HEV", "BEV", "EFUEL")
CLASSES = ("HDV", "AV", "CAV")
# lexicographic order used for apportionment ties
_FUEL_TIE_ORDER = ("BEV", "EFUEL", "HEV", "ICEV")
CANONICAL_MPR = (0.0, 0.5, 1.0)
WINDOW_S = 900


class DemandError(ValueError):
    pass


@dataclass(frozen=True)
class ODPair:
    origin: int
    destination: int
    rate: float

    def __post_init__(self):
        if self.origin == self.destination:
            raise DemandError(f"origin equals destination ({self.origin})")
        if self.rate < 0:
            raise DemandError(f"negative rate for {self.origin}->{self.destination}")


@dataclass(frozen=True)
class FleetMix:
    icev: float = 0.0
    hev: float = 0.0
    bev: float = 0.0
    efuel: float = 0.0
    name: str = ""

    def __post_init__(self):
        shares = self.shares()
        if any(s < 0 or s > 1 for s in shares.values()):
            raise DemandError(f"fleet shares must lie in [0, 1]: {shares}")
        if abs(sum(shares.values()) - 1.0) > 1e-9:
            raise DemandError(f"fleet shares sum to {sum(shares.values())}, not 1")

    def shares(self) -> dict[str, float]:
        return {"ICEV": self.icev, "HEV": self.hev, "BEV": self.bev, "EFUEL": self.efuel}


def _mix(name, i, h, b, e):
    return FleetMix(i / 100, h / 100, b / 100, e / 100, name)


# The fourteen fleet compositions studied (ICEV/HEV/BEV/e-fuel percent).
MIXES: dict[str, FleetMix] = {
    m.name: m
    for m in (
        _mix("I100", 100, 0, 0, 0),
        _mix("I50H50", 50, 50, 0, 0),
        _mix("ES", 25, 25, 25, 25),
        _mix("I25H75", 25, 75, 0, 0),
        _mix("I25B75", 25, 0, 75, 0),
        _mix("I75H25", 75, 25, 0, 0),
        _mix("I75B25", 75, 0, 25, 0),
        _mix("B100", 0, 0, 100, 0),
        _mix("E100", 0, 0, 0, 100),
        _mix("I50B50", 50, 0, 50, 0),
        _mix("I50E50", 50, 0, 0, 50),
        _mix("I25E75", 25, 0, 0, 75),
        _mix("H100", 0, 100, 0, 0),
        _mix("I75E25", 75, 0, 0, 25),
    )
}


def get_mix(spec) -> FleetMix:
    """Resolve a mix name or an explicit ``{"ICEV": .., ...}`` share dict."""
    if isinstance(spec, FleetMix):
        return spec
    if isinstance(spec, str):
        try:
            return MIXES[spec]
        except KeyError:
            raise DemandError(f"unknown fleet mix {spec!r}") from None
    s = {k.upper(): float(v) for k, v in dict(spec).items() if k != "name"}
    return FleetMix(s.get("ICEV", 0.0), s.get("HEV", 0.0), s.get("BEV", 0.0), s.get("EFUEL", 0.0),
                    str(dict(spec).get("name", "custom")))


@dataclass(frozen=True)
class VehicleSpec:
    id: int
    od: ODPair
    departure_time: float
    cls: str = "HDV"
    fuel: str = "ICEV"
    heavy: bool = False
    mass: float = 1.48  # metric tons
    desired_speed_factor: float = 1.0


def load_od(path: str | os.PathLike) -> list[ODPair]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"origin", "destination", "rate"} <= set(reader.fieldnames):
            raise DemandError(f"{path}: expected header origin,destination,rate")
        return [ODPair(int(r["origin"]), int(r["destination"]), float(r["rate"])) for r in reader]


def save_od(od_table: list[ODPair], path: str | os.PathLike) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["origin", "destination", "rate"])
        for od in od_table:
            w.writerow([od.origin, od.destination, repr(od.rate)])


def _reachable(graph: NetworkGraph, origin: int) -> np.ndarray:
    seen = np.zeros(graph.n_nodes, dtype=bool)
    stack = [graph.node_index[origin]]
    seen[stack[0]] = True
    while stack:
        u = stack.pop()
        for k in range(graph.out_ptr[u], graph.out_ptr[u + 1]):
            v = graph.link_to[graph.out_idx[k]]
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return seen


def generate_vehicles(
    od_table: list[ODPair],
    total_demand: int,
    window: float = WINDOW_S,
    seed: int = 0,
    graph: NetworkGraph | None = None,
) -> list[VehicleSpec]:
    """Draw ``total_demand`` trips over the loading window.

    Counts per OD pair are multinomial in the rates; departure times are
    uniform on [0, window) rounded down to whole seconds. Vehicle ids follow
    departure order.
    """
    if total_demand < 0:
        raise DemandError("total_demand must be >= 0")
    if not od_table:
        raise DemandError("empty OD table")
    if graph is not None:
        cache: dict[int, np.ndarray] = {}
        for od in od_table:
            if od.origin not in graph.node_index or od.destination not in graph.node_index:
                raise DemandError(f"OD pair {od.origin}->{od.destination} references unknown node")
            if od.origin not in cache:
                cache[od.origin] = _reachable(graph, od.origin)
            if not cache[od.origin][graph.node_index[od.destination]]:
                raise DemandError(f"unreachable OD pair {od.origin}->{od.destination}")
    if total_demand == 0:
        return []
    rates = np.array([od.rate for od in od_table], dtype=np.float64)
    if rates.sum() <= 0:
        raise DemandError("OD rates sum to zero")
    rng = np.random.default_rng([seed, 0])
    counts = rng.multinomial(total_demand, rates / rates.sum())
    od_idx = np.repeat(np.arange(len(od_table)), counts)
    times = np.floor(rng.uniform(0.0, window, size=total_demand))
    order = np.lexsort((od_idx, times))
    return [
        VehicleSpec(id=k, od=od_table[od_idx[j]], departure_time=float(times[j]))
        for k, j in enumerate(order)
    ]


def apportion(shares: dict[str, float], n: int, order: tuple[str, ...] = _FUEL_TIE_ORDER) -> dict[str, int]:
    """Largest-remainder apportionment of ``n`` seats.

    Leftover seats go to the largest remainders; equal remainders favour the
    larger share, then the earlier key in ``order``.
    """
    keys = [k for k in order if k in shares] + [k for k in shares if k not in order]
    quotas = {k: shares[k] * n for k in keys}
    counts = {k: int(np.floor(quotas[k] + 1e-9)) for k in keys}
    left = n - sum(counts.values())
    rank = sorted(
        keys,
        key=lambda k: (-round(quotas[k] - counts[k], 9), -shares[k], keys.index(k)),
    )
    for k in rank[:left]:
        counts[k] += 1
    return counts


def assign_fuel_and_class(
    vehicles: list[VehicleSpec],
    mix: FleetMix,
    cav_mpr: float,
    seed: int = 0,
    av_share: float = 0.0,
    heavy_share: float = 0.0,
    masses: dict | None = None,
) -> list[VehicleSpec]:
    """Set fuel, automation class and heavy flag with exact counts.

    Fuel blocks are laid out along one seeded permutation in BEV, EFUEL,
    HEV, ICEV order, so raising one share only converts vehicles (the BEV
    set of I75B25 is a subset of the BEV set of I50B50 for the same seed).
    Class and heavy-vehicle draws use independent streams, so they do not
    depend on the mix.
    """
    if cav_mpr not in CANONICAL_MPR:
        warnings.warn(f"non-canonical CAV penetration {cav_mpr}", stacklevel=2)
    if not 0 <= cav_mpr <= 1 or not 0 <= av_share <= 1 - cav_mpr + 1e-12:
        raise DemandError("invalid CAV/AV shares")
    n = len(vehicles)
    if n == 0:
        return []
    masses = masses or {}

    fuel_counts = apportion(mix.shares(), n)
    perm = np.random.default_rng([seed, 1]).permutation(n)
    fuel = np.empty(n, dtype=object)
    pos = 0
    for f in _FUEL_TIE_ORDER:
        fuel[perm[pos: pos + fuel_counts[f]]] = f
        pos += fuel_counts[f]

    cls_counts = apportion({"CAV": cav_mpr, "AV": av_share, "HDV": 1 - cav_mpr - av_share}, n,
                           order=("CAV", "AV", "HDV"))
    perm = np.random.default_rng([seed, 2]).permutation(n)
    cls = np.full(n, "HDV", dtype=object)
    cls[perm[: cls_counts["CAV"]]] = "CAV"
    cls[perm[cls_counts["CAV"]: cls_counts["CAV"] + cls_counts["AV"]]] = "AV"

    n_heavy = apportion({"heavy": heavy_share, "light": 1 - heavy_share}, n, ("heavy", "light"))["heavy"]
    heavy = np.zeros(n, dtype=bool)
    heavy[np.random.default_rng([seed, 3]).permutation(n)[:n_heavy]] = True

    out = []
    for k, v in enumerate(vehicles):
        key = ("heavy" if heavy[k] else "light", fuel[k])
        mass = masses.get(key, v.mass)
        out.append(replace(v, fuel=str(fuel[k]), cls=str(cls[k]), heavy=bool(heavy[k]), mass=mass))
    return out


def synthetic_od(graph: NetworkGraph, seed: int = 11, n_pairs: int = 120) -> list[ODPair]:
    """Perimeter-to-core OD table for grid fixtures.

    Origins sit on the grid boundary; three quarters of the pairs end in the
    central block, the rest cross the network. Rates are drawn from a
    lognormal so a few corridors dominate.
    """
    n = int(round(np.sqrt(graph.n_nodes)))
    ids = graph.node_ids.reshape(n, n)
    perim = np.concatenate([ids[0], ids[-1], ids[1:-1, 0], ids[1:-1, -1]])
    lo, hi = n // 2 - 2, n // 2 + 2
    core = ids[lo:hi, lo:hi].ravel()
    rng = np.random.default_rng(seed)
    pairs: dict[tuple[int, int], float] = {}
    while len(pairs) < n_pairs:
        o = int(rng.choice(perim))
        d = int(rng.choice(core)) if rng.random() < 0.75 else int(rng.choice(perim))
        if o == d or (o, d) in pairs:
            continue
        pairs[(o, d)] = round(float(rng.lognormal(0.0, 0.6)), 4)
    return [ODPair(o, d, r) for (o, d), r in sorted(pairs.items())]
