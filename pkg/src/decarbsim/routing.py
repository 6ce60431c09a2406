"""Generalized link costs and the three route-choice strategies.

Every strategy reduces to a shortest-path query over a frozen per-link cost
snapshot. Snapshots change only at interval boundaries, so routes are
extracted from per-destination next-hop tables computed once per snapshot.

* UE: travel-time-only route chosen at departure from the latest interval
  states and never revised (HDVs and AVs, and CAVs when nobody re-routes).
* Myopic: CAVs re-solve every interval over the current-interval costs.
* Anticipatory: CAVs re-solve every interval over one-step forecasts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .network import V_FLOOR, LinkState, NetworkGraph, travel_times

log = logging.getLogger(__name__)

STRATEGIES = ("UE", "M", "A")
_NORM_FLOOR = 1e-12


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class CostWeights:
    beta_t: float = 30.0 / 3600.0  # CAD per second
    beta_ghg: float = 5e-5  # CAD per g CO2eq
    beta_nox: float = 5e-3  # CAD per g
    w_t: float = 1.0
    w_ghg: float = 1.0
    w_nox: float = 1.0

    def __post_init__(self):
        if min(self.beta_t, self.beta_ghg, self.beta_nox) < 0:
            raise ValueError("betas must be non-negative")
        if min(self.w_t, self.w_ghg, self.w_nox) < 0:
            raise ValueError("weights must be non-negative")
        if max(self.w_t, self.w_ghg, self.w_nox) <= 0:
            raise ValueError("at least one weight must be positive")

    def scaled(self, k: float) -> "CostWeights":
        return CostWeights(self.beta_t * k, self.beta_ghg * k, self.beta_nox * k, self.w_t, self.w_ghg, self.w_nox)


TT_ONLY = CostWeights(w_t=1.0, w_ghg=0.0, w_nox=0.0)


@dataclass(frozen=True)
class LinkCost:
    link_id: int
    interval: int
    tt: float
    ghg_cost: float
    nox_cost: float
    generalized: float
    clamped: bool = False


@dataclass(frozen=True)
class Route:
    links: tuple
    cost: float

    def __len__(self) -> int:
        return len(self.links)


def _state_fields(state) -> tuple[float, float, float]:
    if isinstance(state, LinkState):
        return state.space_mean_speed, state.ghg_er, state.nox_er
    if isinstance(state, dict):
        return float(state["speed"]), float(state.get("ghg_er", 0.0)), float(state.get("nox_er", 0.0))
    speed, ghg, nox = state
    return float(speed), float(ghg), float(nox)


def link_generalized_cost(link, state, weights: CostWeights, interval: int = 0,
                          v_floor: float = V_FLOOR) -> LinkCost:
    """Monetised cost of traversing ``link`` under ``state``.

    ``state`` is a LinkState, a ``{"speed", "ghg_er", "nox_er"}`` dict or a
    (speed, ghg_er, nox_er) tuple; forecasts use the same shapes.
    """
    speed, ghg_er, nox_er = _state_fields(state)
    if min(speed, ghg_er, nox_er) < 0:
        raise ValueError("link state values must be non-negative")
    clamped = speed < v_floor
    tt = link.length / (v_floor if clamped else speed)
    ghg = ghg_er * tt
    nox = nox_er * tt
    gen = tt * weights.beta_t * weights.w_t + ghg * weights.beta_ghg * weights.w_ghg + nox * weights.beta_nox * weights.w_nox
    return LinkCost(link.id, interval, tt, ghg, nox, gen, clamped)


def normalize_objectives(components) -> np.ndarray:
    """Divide each column (objective) by its mean over the candidate links."""
    x = np.asarray(components, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 1:
        raise ValueError("need at least one candidate link")
    return x / np.maximum(x.mean(axis=0), _NORM_FLOOR)


def _impute(er) -> np.ndarray:
    er = np.asarray(er, dtype=np.float64)
    seen = er > 0
    if not seen.any():
        return er
    return np.where(seen, er, er[seen].mean())


def network_costs(graph: NetworkGraph, speed, ghg_er, nox_er, weights: CostWeights,
                  normalize: bool = True, v_floor: float = V_FLOOR, impute_empty: bool = True) -> np.ndarray:
    """Generalized cost of every link for one snapshot.

    With ``normalize`` each monetised objective is divided by its network
    mean before weighting, so the weights trade off objectives on a common
    scale (the betas then cancel). Without it the plain monetised sum is
    used. Links nobody drove last interval report a zero rate; with
    ``impute_empty`` they are costed at the mean rate of occupied links so
    that emptiness alone does not make a link look clean.
    """
    tt, _ = travel_times(graph.length, np.asarray(speed, dtype=np.float64), v_floor)
    if impute_empty:
        ghg_er, nox_er = _impute(ghg_er), _impute(nox_er)
    comp = np.column_stack([tt * weights.beta_t, np.asarray(ghg_er) * tt * weights.beta_ghg,
                            np.asarray(nox_er) * tt * weights.beta_nox])
    w = np.array([weights.w_t, weights.w_ghg, weights.w_nox])
    if normalize:
        comp = normalize_objectives(comp)
    return comp @ w if w.all() else comp[:, w > 0] @ w[w > 0]


# -- shortest paths ----------------------------------------------------------


class NextHopTable:
    """Lazily computed next-hop rows, one per destination node index."""

    def __init__(self, graph: NetworkGraph, costs: np.ndarray):
        costs = np.ascontiguousarray(costs, dtype=np.float64)
        if costs.shape != (graph.n_links,):
            raise ValueError("one cost per link required")
        if np.any(costs < 0) or not np.all(np.isfinite(costs)):
            raise RoutingError("link costs must be finite and non-negative")
        self.graph = graph
        self.costs = costs
        self._rows: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def prepare(self, dests) -> None:
        todo = np.array(sorted(set(int(d) for d in dests) - self._rows.keys()), dtype=np.int64)
        if len(todo) == 0:
            return
        g = self.graph
        nxt = np.empty((len(todo), g.n_nodes), dtype=np.int64)
        dist = np.empty((len(todo), g.n_nodes))
        K.next_hop_table(g.n_nodes, g.link_from, g.in_ptr, g.in_idx, self.costs, todo, nxt, dist)
        for k, d in enumerate(todo):
            self._rows[int(d)] = (nxt[k], dist[k])

    def path(self, origin: int, dest: int) -> list[int]:
        """Link indices from node index ``origin`` to ``dest``."""
        self.prepare([dest])
        nxt, dist = self._rows[dest]
        if not np.isfinite(dist[origin]):
            g = self.graph
            raise RoutingError(f"node {g.node_ids[dest]} unreachable from node {g.node_ids[origin]}")
        out = []
        u = origin
        while u != dest:
            link = nxt[u]
            out.append(int(link))
            u = self.graph.link_to[link]
        return out

    def cost(self, origin: int, dest: int) -> float:
        self.prepare([dest])
        return float(self._rows[dest][1][origin])


def shortest_path(graph: NetworkGraph, costs, origin: int, destination: int) -> Route:
    """Cost-minimal route between two node ids.

    Ties go to the route with fewer links, then to the lexicographically
    smallest sequence of link ids.
    """
    if origin not in graph.node_index or destination not in graph.node_index:
        raise RoutingError(f"unknown node in query {origin}->{destination}")
    if isinstance(costs, dict):
        costs = np.array([costs[int(l)] for l in graph.link_ids], dtype=np.float64)
    table = NextHopTable(graph, np.asarray(costs, dtype=np.float64))
    o, d = graph.node_index[origin], graph.node_index[destination]
    links = table.path(o, d)
    return Route(tuple(int(graph.link_ids[k]) for k in links), table.cost(o, d))


# -- strategies ----------------------------------------------------------------


def _speeds_from(graph: NetworkGraph, states) -> np.ndarray:
    if states is None:
        return graph.ffs.copy()
    if isinstance(states, np.ndarray):
        return states
    by_id = {s.link_id: s.space_mean_speed for s in states}
    return np.array([by_id.get(int(l), graph.ffs[k]) for k, l in enumerate(graph.link_ids)])


def _channels_from(graph: NetworkGraph, states):
    if isinstance(states, dict):
        return (np.asarray(states["speed"]), np.asarray(states["ghg_er"]), np.asarray(states["nox_er"]))
    by_id = {s.link_id: s for s in states}
    speed, ghg, nox = graph.ffs.copy(), np.zeros(graph.n_links), np.zeros(graph.n_links)
    for k, l in enumerate(graph.link_ids):
        s = by_id.get(int(l))
        if s is not None:
            speed[k], ghg[k], nox[k] = s.space_mean_speed, s.ghg_er, s.nox_er
    return speed, ghg, nox


def route_ue(vehicle, graph: NetworkGraph, states=None) -> Route:
    """Travel-time route from the vehicle's origin under entry-time states."""
    tt, _ = travel_times(graph.length, _speeds_from(graph, states))
    return shortest_path(graph, tt, vehicle.od.origin, vehicle.od.destination)


def route_myopic(vehicle, graph: NetworkGraph, states, weights: CostWeights = TT_ONLY, from_node=None,
                 normalize: bool = True) -> Route:
    """Route from ``from_node`` (default: origin) over current-interval costs."""
    speed, ghg, nox = _channels_from(graph, states)
    costs = network_costs(graph, speed, ghg, nox, weights, normalize)
    start = vehicle.od.origin if from_node is None else from_node
    return shortest_path(graph, costs, start, vehicle.od.destination)


def route_anticipatory(vehicle, graph: NetworkGraph, forecasts, weights: CostWeights = TT_ONLY,
                       from_node=None, normalize: bool = True) -> Route:
    """Route over next-interval forecasts; ``None`` falls back to myopic on current states."""
    if forecasts is None:
        raise RoutingError("no forecasts available; use route_myopic")
    return route_myopic(vehicle, graph, forecasts, weights, from_node, normalize)


# -- simulation router -----------------------------------------------------------


def route_ue_batch(world, vids: np.ndarray, use_states: bool = True) -> None:
    """Assign travel-time routes from origin to every vehicle in ``vids``."""
    g = world.graph
    speed = world.history.latest("speed") if use_states else g.ffs
    key = ("ue", len(world.history) if use_states else -1)
    table = world.__dict__.get("_ue_table")
    if table is None or world.__dict__.get("_ue_key") != key:
        tt, _ = travel_times(g.length, speed)
        table = NextHopTable(g, tt)
        world._ue_table, world._ue_key = table, key
    table.prepare(world.dest[vids])
    for i in vids:
        world.set_route(i, table.path(world.origin[i], world.dest[i]))


class StrategyRouter:
    """Routes HDVs/AVs by UE and CAVs by the scenario strategy.

    ``forecaster(world, interval)`` returns a dict of next-interval
    ``speed``/``ghg_er``/``nox_er`` arrays for anticipatory routing, or
    ``None`` when no model is available (then current states are used and
    ``fallbacks`` is incremented).
    """

    def __init__(self, strategy: str = "UE", weights: CostWeights = CostWeights(), normalize: bool = True,
                 forecaster=None):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown routing strategy {strategy!r}")
        self.strategy = strategy
        self.weights = weights
        self.normalize = normalize
        self.forecaster = forecaster
        self.fallbacks = 0
        self.evaluations = 0
        self._cav_table: NextHopTable | None = None

    def _snapshot(self, world, interval: int) -> NextHopTable:
        h = world.history
        if len(h) == 0:
            speed, ghg, nox = world.graph.ffs, np.zeros(world.graph.n_links), np.zeros(world.graph.n_links)
        else:
            speed, ghg, nox = h.latest("speed"), h.latest("ghg_er"), h.latest("nox_er")
        if self.strategy == "A" and len(h):
            fc = self.forecaster(world, interval) if self.forecaster is not None else None
            if fc is None:
                self.fallbacks += 1
            else:
                speed, ghg, nox = fc["speed"], fc["ghg_er"], fc["nox_er"]
        costs = network_costs(world.graph, speed, ghg, nox, self.weights, self.normalize)
        return NextHopTable(world.graph, costs)

    def on_departure(self, world, vids):
        ue = vids if self.strategy == "UE" else vids[world.cls[vids] != 2]
        if len(ue):
            route_ue_batch(world, ue)
        if self.strategy == "UE":
            return
        cav = vids[world.cls[vids] == 2]
        if len(cav):
            if self._cav_table is None:
                self._cav_table = self._snapshot(world, len(world.history) - 1)
            self._cav_table.prepare(world.dest[cav])
            for i in cav:
                world.set_route(i, self._cav_table.path(world.origin[i], world.dest[i]))

    def on_interval(self, world, interval):
        if self.strategy == "UE":
            return
        table = self._snapshot(world, interval)
        self._cav_table = table
        sel = np.flatnonzero((world.cls == 2) & ((world.status == K.ACTIVE) | (world.status == K.WAITING)))
        if len(sel) == 0:
            return
        table.prepare(np.unique(world.dest[sel]))
        g = world.graph
        for i in sel:
            self.evaluations += 1
            if world.status[i] == K.WAITING:
                keep = 1  # already queued for its first link
            else:
                keep = world.ridx[i] + 1 + (1 if world.granted[i] and world.glane[i] >= 0 else 0)
            if keep >= world.rlen[i]:
                continue
            last = world.route[i, keep - 1]
            u = g.link_to[last]
            if u == world.dest[i]:
                continue
            tail = table.path(u, world.dest[i])
            old = world.route[i, keep: world.rlen[i]]
            if len(tail) == len(old) and np.array_equal(tail, old):
                continue
            world.set_route(i, np.concatenate([world.route[i, :keep], tail]))
            world.reroutes += 1
