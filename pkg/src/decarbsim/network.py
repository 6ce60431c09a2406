"""Road network topology and per-interval link state bookkeeping."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

INTERVAL_S = 60
WINDOW = 250
V_FLOOR = 0.5
CHANNELS = ("ghg_er", "nox_er", "speed")

NODE_KINDS = ("ordinary", "intelligent-intersection")


class NetworkError(ValueError):
    """Raised for malformed network files or inconsistent topology."""


@dataclass(frozen=True)
class Node:
    id: int
    kind: str = "ordinary"


@dataclass(frozen=True)
class Link:
    id: int
    from_node: int
    to_node: int
    length: float  # m
    lanes: int
    free_flow_speed: float  # m/s


@dataclass
class LinkState:
    link_id: int
    interval_index: int
    space_mean_speed: float  # m/s
    density: float  # veh/km (per lane unless configured otherwise)
    flow: float  # veh/h
    ghg_er: float = 0.0  # CO2eq g/s
    nox_er: float = 0.0  # g/s


class NetworkGraph:
    """Directed road graph.

    Links and nodes are kept sorted by id, so array index order equals id
    order. Routing relies on this for its lexicographic tie-break.
    """

    def __init__(self, nodes: list[Node], links: list[Link]):
        self.nodes = sorted(nodes, key=lambda n: n.id)
        self.links = sorted(links, key=lambda l: l.id)
        self.node_index = {n.id: i for i, n in enumerate(self.nodes)}
        self.link_index = {l.id: i for i, l in enumerate(self.links)}
        self.link_ids = np.array([l.id for l in self.links], dtype=np.int64)
        self.node_ids = np.array([n.id for n in self.nodes], dtype=np.int64)
        self.link_from = np.array([self.node_index[l.from_node] for l in self.links], dtype=np.int64)
        self.link_to = np.array([self.node_index[l.to_node] for l in self.links], dtype=np.int64)
        self.length = np.array([l.length for l in self.links], dtype=np.float64)
        self.lanes = np.array([l.lanes for l in self.links], dtype=np.int64)
        self.ffs = np.array([l.free_flow_speed for l in self.links], dtype=np.float64)
        self.strongly_connected = self._check_connectivity()
        self._build_adjacency()

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    def _check_connectivity(self) -> bool:
        n = self.n_nodes
        if n == 0:
            return True
        adj = csr_matrix(
            (np.ones(self.n_links), (self.link_from, self.link_to)), shape=(n, n)
        )
        ncomp, _ = connected_components(adj, directed=True, connection="strong")
        if ncomp != 1:
            log.warning("network is not strongly connected (%d components)", ncomp)
        return ncomp == 1

    def _build_adjacency(self) -> None:
        # CSR of incoming and outgoing link indices per node, ordered by link index
        n = self.n_nodes
        order_in = np.argsort(self.link_to, kind="stable")
        self.in_ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(self.in_ptr, self.link_to + 1, 1)
        self.in_ptr = np.cumsum(self.in_ptr)
        self.in_idx = order_in.astype(np.int64)
        order_out = np.argsort(self.link_from, kind="stable")
        self.out_ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(self.out_ptr, self.link_from + 1, 1)
        self.out_ptr = np.cumsum(self.out_ptr)
        self.out_idx = order_out.astype(np.int64)

    def free_flow_times(self) -> np.ndarray:
        return self.length / self.ffs

    def __eq__(self, other) -> bool:
        if not isinstance(other, NetworkGraph):
            return NotImplemented
        return self.nodes == other.nodes and self.links == other.links

    def __repr__(self) -> str:
        return f"NetworkGraph(nodes={self.n_nodes}, links={self.n_links})"


def _read_rows(path: Path, required: tuple[str, ...]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise NetworkError(f"{path.name}: missing header row")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise NetworkError(f"{path.name}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            yield lineno, row


def load_network(source: str | os.PathLike, links_path: str | os.PathLike | None = None) -> NetworkGraph:
    """Load ``nodes.csv``/``links.csv`` from a directory (or explicit paths)."""
    source = Path(source)
    if links_path is None:
        nodes_path, links_path = source / "nodes.csv", source / "links.csv"
    else:
        nodes_path, links_path = source, Path(links_path)

    nodes: list[Node] = []
    seen: set[int] = set()
    for lineno, row in _read_rows(nodes_path, ("id", "kind")):
        try:
            nid = int(row["id"])
        except ValueError:
            raise NetworkError(f"bad node id on line {lineno}: {row['id']!r}") from None
        if nid in seen:
            raise NetworkError(f"duplicate node id {nid}")
        kind = (row["kind"] or "ordinary").strip()
        if kind not in NODE_KINDS:
            raise NetworkError(f"unknown node kind {kind!r}, node {nid}")
        seen.add(nid)
        nodes.append(Node(nid, kind))

    links: list[Link] = []
    link_seen: set[int] = set()
    for lineno, row in _read_rows(links_path, ("id", "from", "to", "length_m", "lanes", "ffs_mps")):
        lid = int(row["id"])
        if lid in link_seen:
            raise NetworkError(f"duplicate link id {lid}")
        link_seen.add(lid)
        a, b = int(row["from"]), int(row["to"])
        for nid in (a, b):
            if nid not in seen:
                raise NetworkError(f"dangling node reference {nid}, link {lid}")
        if a == b:
            raise NetworkError(f"self-loop, link {lid}")
        length = float(row["length_m"])
        if not length > 0:
            raise NetworkError(f"non-positive length, link {lid}")
        lanes = int(row["lanes"])
        if lanes < 1:
            raise NetworkError(f"lanes must be >= 1, link {lid}")
        ffs = float(row["ffs_mps"])
        if not ffs > 0:
            raise NetworkError(f"non-positive free-flow speed, link {lid}")
        links.append(Link(lid, a, b, length, lanes, ffs))

    used = {l.from_node for l in links} | {l.to_node for l in links}
    orphans = sorted(seen - used)
    if orphans:
        raise NetworkError(f"node {orphans[0]} is not referenced by any link")
    return NetworkGraph(nodes, links)


def save_network(graph: NetworkGraph, directory: str | os.PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "nodes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "kind"])
        for n in graph.nodes:
            w.writerow([n.id, n.kind])
    with open(directory / "links.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "from", "to", "length_m", "lanes", "ffs_mps"])
        for l in graph.links:
            w.writerow([l.id, l.from_node, l.to_node, repr(l.length), l.lanes, repr(l.free_flow_speed)])


def grid_network(
    n: int = 10,
    length: float = 250.0,
    ffs: float = 11.11,
    arterial_rows: tuple[int, ...] = (),
    arterial_ffs: float = 16.67,
    arterial_lanes: int = 2,
) -> NetworkGraph:
    """Directed 4-neighbour n x n grid; 2*2*n*(n-1) links."""
    nodes = [Node(r * n + c, "intelligent-intersection") for r in range(n) for c in range(n)]
    links = []
    lid = 0
    for r in range(n):
        for c in range(n):
            a = r * n + c
            for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < n and 0 <= cc < n):
                    continue
                b = rr * n + cc
                arterial = (dr == 0 and r in arterial_rows) or (dc == 0 and c in arterial_rows)
                links.append(
                    Link(
                        lid,
                        a,
                        b,
                        length,
                        arterial_lanes if arterial else 1,
                        arterial_ffs if arterial else ffs,
                    )
                )
                lid += 1
    return NetworkGraph(nodes, links)


# -- travel time -------------------------------------------------------------


def link_travel_time(link: Link, state: LinkState | float, v_floor: float = V_FLOOR) -> tuple[float, bool]:
    """Travel time ``length / speed`` in seconds, and whether the speed was clamped."""
    v = state.space_mean_speed if isinstance(state, LinkState) else float(state)
    if v < v_floor:
        log.debug("speed %.3f on link %d clamped to %.2f m/s", v, link.id, v_floor)
        return link.length / v_floor, True
    return link.length / v, False


def travel_times(lengths: np.ndarray, speeds: np.ndarray, v_floor: float = V_FLOOR):
    """Vectorised :func:`link_travel_time`; returns (seconds, clamp mask)."""
    clamped = speeds < v_floor
    return lengths / np.where(clamped, v_floor, speeds), clamped


# -- interval aggregation ----------------------------------------------------


def interval_states(
    graph: NetworkGraph,
    veh_seconds: np.ndarray,
    distance: np.ndarray,
    interval_s: float = INTERVAL_S,
    per_lane: bool = True,
):
    """Space-mean speed, density and flow arrays from per-link accumulators.

    ``veh_seconds`` is the vehicle-time spent on each link during the
    interval and ``distance`` the distance covered there. Empty links report
    free-flow speed and zero density/flow. Flow is density (veh/km) times
    speed converted to km/h.
    """
    occupied = veh_seconds > 0
    speed = np.where(occupied, distance / np.where(occupied, veh_seconds, 1.0), graph.ffs)
    speed = np.minimum(speed, graph.ffs * 1.05)
    lane_km = graph.length / 1000.0 * (graph.lanes if per_lane else 1)
    density = (veh_seconds / interval_s) / lane_km
    flow = density * speed * 3.6
    return speed, density, flow


def record_interval_state(
    trajectories,
    interval: int,
    graph: NetworkGraph,
    interval_s: float = INTERVAL_S,
    per_lane: bool = True,
    ghg_er: np.ndarray | None = None,
    nox_er: np.ndarray | None = None,
) -> list[LinkState]:
    """Aggregate one interval of per-second trajectory records into link states.

    Records need ``t``, ``link_id`` and ``speed``; an optional ``dist`` field
    (metres covered during that second) is used in place of ``speed * 1 s``.
    Emission rates are supplied by the caller (see the emissions module).
    """
    n = graph.n_links
    vs = np.zeros(n)
    dist = np.zeros(n)
    lo, hi = interval * interval_s, (interval + 1) * interval_s
    for rec in trajectories:
        if not (lo <= rec.t < hi):
            continue
        i = graph.link_index[rec.link_id]
        vs[i] += 1.0
        d = getattr(rec, "dist", None)
        dist[i] += rec.speed if d is None else d
    speed, density, flow = interval_states(graph, vs, dist, interval_s, per_lane)
    ghg = np.zeros(n) if ghg_er is None else ghg_er
    nox = np.zeros(n) if nox_er is None else nox_er
    return [
        LinkState(int(graph.link_ids[i]), interval, float(speed[i]), float(density[i]),
                  float(flow[i]), float(ghg[i]), float(nox[i]))
        for i in range(n)
    ]


@dataclass
class StateHistory:
    """Per-interval link channels, appended by the simulation loop."""

    graph: NetworkGraph
    window: int = WINDOW
    speed: list = field(default_factory=list)
    density: list = field(default_factory=list)
    flow: list = field(default_factory=list)
    ghg_er: list = field(default_factory=list)
    nox_er: list = field(default_factory=list)

    def append(self, speed, density, flow, ghg_er, nox_er) -> None:
        self.speed.append(np.asarray(speed, dtype=np.float64))
        self.density.append(np.asarray(density, dtype=np.float64))
        self.flow.append(np.asarray(flow, dtype=np.float64))
        self.ghg_er.append(np.asarray(ghg_er, dtype=np.float64))
        self.nox_er.append(np.asarray(nox_er, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.speed)

    def latest(self, channel: str) -> np.ndarray:
        """Most recent interval of a channel (free-flow/zero when empty)."""
        rows = getattr(self, channel)
        if rows:
            return rows[-1]
        return self.graph.ffs.copy() if channel == "speed" else np.zeros(self.graph.n_links)

    def matrix(self, channel: str) -> np.ndarray:
        """(intervals, links) array of a channel."""
        rows = getattr(self, channel)
        if not rows:
            return np.zeros((0, self.graph.n_links))
        return np.vstack(rows)

    def series_batch(self, channel: str, now: int | None = None) -> np.ndarray:
        """Padded windows for every link: shape (links, window)."""
        if channel not in CHANNELS:
            raise KeyError(f"unknown channel {channel!r}")
        mat = self.matrix(channel)
        if now is None:
            now = len(mat) - 1
        mat = mat[: now + 1]
        return pad_windows(mat, self.window, self._default(channel))

    def _default(self, channel: str) -> np.ndarray:
        return self.graph.ffs.copy() if channel == "speed" else np.zeros(self.graph.n_links)

    def get_state_series(self, link_id: int, channel: str, now: int) -> np.ndarray:
        if link_id not in self.graph.link_index:
            raise KeyError(f"unknown link {link_id}")
        i = self.graph.link_index[link_id]
        return self.series_batch(channel, now)[i]


def pad_windows(mat: np.ndarray, window: int, default: np.ndarray) -> np.ndarray:
    """Left-pad (intervals, links) history to (links, window).

    Padding repeats the earliest available value; a link with no history at
    all gets ``default`` throughout.
    """
    n_links = mat.shape[1] if mat.ndim == 2 and mat.shape[0] else len(default)
    out = np.empty((n_links, window))
    k = min(len(mat), window)
    if k == 0:
        out[:] = np.asarray(default)[:, None]
        return out
    tail = mat[-k:].T
    out[:, window - k:] = tail
    out[:, : window - k] = tail[:, :1]
    return out


def get_state_series(history: StateHistory, link_id: int, channel: str, now: int) -> np.ndarray:
    return history.get_state_series(link_id, channel, now)
