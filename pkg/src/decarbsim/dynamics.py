"""Second-by-second vehicle kinematics on the link network.

Car following is the Intelligent Driver Model. Each link holds one FIFO
queue per lane; a lane head may cross its downstream intersection only after
being granted passage, which needs intersection capacity that second and
room on the next link of its route. A head without a grant treats the stop
line as a stopped obstacle. Routing lives elsewhere: the world calls a
router object when vehicles depart and at every interval boundary.
"""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import kernels as K
from .demand import VehicleSpec
from .ecodriving import DEFAULT_RESISTANCE, EcoParams, braking_energy_kernel, eco_filter_batch
from .emissions import EmissionModel, FleetEmissionParams, fleet_rates, link_space_mean_er_batch
from .network import INTERVAL_S, NetworkGraph, StateHistory, interval_states

log = logging.getLogger(__name__)

B_MAX = 8.0  # emergency deceleration cap, m/s^2


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class IDMParams:
    v0: float = 13.89
    T: float = 1.5
    s0: float = 2.0
    a_max: float = 1.5
    b: float = 2.0

    def __post_init__(self):
        for name in ("v0", "T", "s0", "a_max", "b"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IDM parameter {name} must be positive")


HDV_IDM = IDMParams()
CAV_IDM = IDMParams(T=0.75, s0=1.0)


@dataclass
class VehicleState:
    vehicle_id: int
    link_id: int
    position: float
    speed: float
    accel: float = 0.0
    route: tuple = ()
    arrived: bool = False
    odometer: float = 0.0
    clock_entered: float = 0.0

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        if self.position < 0:
            raise ValueError("position must be non-negative")


@dataclass(frozen=True)
class TrajectoryRecord:
    vehicle_id: int
    t: int
    link_id: int
    speed: float
    accel: float


def idm_acceleration(me: VehicleState, leader: VehicleState | None, params: IDMParams,
                     gap: float | None = None, leader_length: float = 5.0, b_max: float = B_MAX) -> float:
    """IDM acceleration of ``me`` behind ``leader`` (or on a free road).

    ``gap`` is the bumper-to-bumper distance; when omitted it is taken from
    the two positions on a shared link. A non-positive gap returns the
    emergency deceleration ``-b_max``.
    """
    v = me.speed
    free = 1.0 - (v / params.v0) ** 4
    if leader is None:
        return max(params.a_max * free, -b_max)
    if gap is None:
        gap = leader.position - leader_length - me.position
    if gap <= 0:
        return -b_max
    dv = v - leader.speed
    s_star = params.s0 + max(0.0, v * params.T + v * dv / (2.0 * np.sqrt(params.a_max * params.b)))
    return max(params.a_max * (free - (s_star / gap) ** 2), -b_max)


@dataclass
class SimConfig:
    dt: float = 1.0
    interval_s: int = INTERVAL_S
    node_cap: int = 1  # grants per intersection per second
    grant_time: float = 4.0  # heads are considered within this many seconds of the line
    grant_min: float = 15.0  # ... or this many metres
    sight: float = 150.0  # heads this close to the line learn whether the next link is full
    er_per_vehicle: bool = True  # link ER as mean per-vehicle rate rather than link total
    light_length: float = 5.0
    heavy_length: float = 12.0
    hdv: IDMParams = HDV_IDM
    cav: IDMParams = CAV_IDM
    heavy_a_max: float = 0.8
    heavy_b: float = 1.5
    hdv_speed_spread: float = 0.05
    entry_speed_frac: float = 0.5
    b_max: float = B_MAX
    eco_driving: bool = False
    eco: EcoParams = field(default_factory=EcoParams)
    per_lane_density: bool = True
    max_t: int = 7200
    stall_s: int = 600  # seconds without any movement before declaring gridlock
    record_trajectories: bool = False
    seed: int = 0


class Router(Protocol):
    def on_departure(self, world: "World", vids: np.ndarray) -> None: ...

    def on_interval(self, world: "World", interval: int) -> None: ...


class FreeFlowRouter:
    """Fixed free-flow shortest routes; used when no strategy is supplied."""

    def on_departure(self, world, vids):
        from .routing import route_ue_batch

        route_ue_batch(world, vids, use_states=False)

    def on_interval(self, world, interval):
        pass


CLASS_CODE = {"HDV": 0, "AV": 1, "CAV": 2}


@dataclass
class GridlockReport:
    t: int
    active: int
    stuck_links: list

    def __str__(self) -> str:
        head = f"gridlock at t={self.t}s with {self.active} active vehicles"
        if not self.stuck_links:
            return head + " (time limit, none yet stalled)"
        return head + "; stuck links: " + ", ".join(str(x) for x in self.stuck_links[:20])


@dataclass
class SimulationResult:
    completion_time: int
    gridlock: GridlockReport | None
    trajectories: list | None
    world: "World"


class World:
    """Mutable state of one replication."""

    def __init__(self, graph: NetworkGraph, vehicles: list[VehicleSpec], emissions: EmissionModel,
                 config: SimConfig | None = None, router: Router | None = None):
        self.graph = graph
        self.cfg = cfg = config or SimConfig()
        self.router = router or FreeFlowRouter()
        self.emissions = emissions
        self.t = 0
        vehicles = sorted(vehicles, key=lambda v: v.id)
        self.specs = vehicles
        n = self.n = len(vehicles)

        # lanes
        self.link_lane0 = np.concatenate([[0], np.cumsum(graph.lanes)[:-1]]).astype(np.int64)
        self.lane_link = np.repeat(np.arange(graph.n_links), graph.lanes).astype(np.int64)
        nl = len(self.lane_link)
        cap = int(np.ceil(graph.length.max() / (cfg.light_length + 0.5 * min(cfg.hdv.s0, cfg.cav.s0)))) + 8
        self.q = np.full((nl, cap), -1, dtype=np.int64)
        self.q_head = np.zeros(nl, dtype=np.int64)
        self.q_cnt = np.zeros(nl, dtype=np.int64)
        self.reserved = np.zeros(nl)
        self.blocked = np.zeros(graph.n_links, dtype=np.bool_)
        self.node_grants = np.zeros(graph.n_nodes, dtype=np.int64)

        # vehicles
        node_idx = graph.node_index
        self.vid = np.array([v.id for v in vehicles], dtype=np.int64)
        self.origin = np.array([node_idx[v.od.origin] for v in vehicles], dtype=np.int64)
        self.dest = np.array([node_idx[v.od.destination] for v in vehicles], dtype=np.int64)
        self.dep_time = np.array([v.departure_time for v in vehicles], dtype=np.float64)
        self.cls = np.array([CLASS_CODE[v.cls] for v in vehicles], dtype=np.int64)
        self.fuels = [v.fuel for v in vehicles]
        self.heavy = np.array([v.heavy for v in vehicles], dtype=bool)
        self.mass_kg = np.array([v.mass * 1000.0 for v in vehicles])
        auto = self.cls > 0
        self.T = np.where(auto, cfg.cav.T, cfg.hdv.T)
        self.s0 = np.where(auto, cfg.cav.s0, cfg.hdv.s0)
        self.amax = np.where(self.heavy, cfg.heavy_a_max, np.where(auto, cfg.cav.a_max, cfg.hdv.a_max))
        self.bcomf = np.where(self.heavy, cfg.heavy_b, np.where(auto, cfg.cav.b, cfg.hdv.b))
        self.vlen = np.where(self.heavy, cfg.heavy_length, cfg.light_length)
        rng = np.random.default_rng([cfg.seed, 4])
        spread = rng.uniform(-cfg.hdv_speed_spread, cfg.hdv_speed_spread, size=n)
        self.v0fac = np.where(auto, 1.0, 1.0 + spread)
        self.v0fac *= np.array([v.desired_speed_factor for v in vehicles])

        self.status = np.zeros(n, dtype=np.int64)
        self.link_of = np.full(n, -1, dtype=np.int64)
        self.lane_of = np.full(n, -1, dtype=np.int64)
        self.pos = np.zeros(n)
        self.speed = np.zeros(n)
        self.acc = np.zeros(n)
        self.granted = np.zeros(n, dtype=np.int64)
        self.held = np.zeros(n, dtype=np.int64)
        self.glane = np.full(n, -1, dtype=np.int64)
        max_route = graph.n_links + 1
        self.route = np.full((n, max_route), -1, dtype=np.int64)
        self.rlen = np.zeros(n, dtype=np.int64)
        self.ridx = np.zeros(n, dtype=np.int64)
        self.enter_time = np.full(n, -1.0)
        self.arr_time = np.full(n, -1.0)
        self.odo = np.zeros(n)
        self.prev_v = np.zeros(n)
        self.disp = np.zeros(n)
        self.start_link = np.full(n, -1, dtype=np.int64)
        self.crossed = np.zeros(n, dtype=np.int64)
        self.n_crossed = np.zeros(1, dtype=np.int64)
        self.clamps = np.zeros(1, dtype=np.int64)
        self.emergencies = 0
        self.reroutes = 0
        self.count_violations = 0  # seconds where departed != waiting + active + arrived

        # per-vehicle emission totals
        self.em_params = FleetEmissionParams(emissions, self.fuels, self.heavy)
        self.ghg = np.zeros(n)
        self.nox = np.zeros(n)
        self.energy = np.zeros(n)
        self.brake_energy = np.zeros(n)

        # per-link accumulators for the current interval
        nlk = graph.n_links
        self.veh_sec = np.zeros(nlk)
        self.dist_acc = np.zeros(nlk)
        self.link_em = np.zeros((nlk, cfg.interval_s, 2))
        self.link_occ = np.zeros((nlk, cfg.interval_s))  # vehicles present each second
        self.link_em_total = np.zeros((nlk, 2))  # whole-run per-link totals, g
        self.history = StateHistory(graph)
        self.next_speed = graph.ffs.copy()

        # pending departures in (time, id) order; waiting queues per origin link
        self._pending = deque(np.argsort(self.dep_time, kind="stable").tolist())
        self.waiting: dict[int, deque] = {}
        self.n_departed = 0
        self.n_arrived = 0
        self.trajectories: list | None = [] if cfg.record_trajectories else None
        self._last_move_t = 0

    # -- helpers -----------------------------------------------------------

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.status == K.ACTIVE))

    @property
    def n_waiting(self) -> int:
        return int(np.count_nonzero(self.status == K.WAITING))

    def set_route(self, i: int, links) -> None:
        """Replace the remainder of vehicle ``i``'s route after its fixed prefix."""
        links = np.asarray(links, dtype=np.int64)
        self.route[i, : len(links)] = links
        self.route[i, len(links):] = -1
        self.rlen[i] = len(links)

    def route_link_ids(self, i: int) -> list[int]:
        return [int(self.graph.link_ids[k]) for k in self.route[i, : self.rlen[i]]]

    def block_link(self, link_id: int) -> None:
        self.blocked[self.graph.link_index[link_id]] = True

    def v0(self, idx: np.ndarray) -> np.ndarray:
        links = self.link_of[idx]
        return np.maximum(self.graph.ffs[links] * self.v0fac[idx], 0.1)

    # -- per-second phases ---------------------------------------------------

    def _depart(self) -> None:
        t = self.t
        due = []
        while self._pending and self.dep_time[self._pending[0]] <= t:
            due.append(self._pending.popleft())
        if not due:
            return
        due = np.array(due, dtype=np.int64)
        self.router.on_departure(self, due)
        for i in due:
            if self.rlen[i] == 0:
                raise SimulationError(f"vehicle {self.vid[i]} has no route")
            self.status[i] = K.WAITING
            self.waiting.setdefault(int(self.route[i, 0]), deque()).append(int(i))
        self.n_departed += len(due)

    def _enter(self) -> None:
        g = self.graph
        for link in sorted(self.waiting):
            dq = self.waiting[link]
            if not dq or self.blocked[link]:
                continue
            used = set()
            while dq:
                i = dq[0]
                lane = K.enter_kernel(link, self.link_lane0[link], g.lanes[link], self.q, self.q_head, self.q_cnt,
                                      self.reserved, self.pos, self.vlen, self.speed, g.length, self.s0[i])
                if lane < 0 or lane in used:
                    break
                used.add(lane)
                dq.popleft()
                v_in = self.cfg.entry_speed_frac * g.ffs[link] * self.v0fac[i]
                if self.q_cnt[lane] > 0:
                    tail = self.q[lane, (self.q_head[lane] + self.q_cnt[lane] - 1) % self.q.shape[1]]
                    v_in = min(v_in, self.speed[tail])
                slot = (self.q_head[lane] + self.q_cnt[lane]) % self.q.shape[1]
                self.q[lane, slot] = i
                self.q_cnt[lane] += 1
                self.status[i] = K.ACTIVE
                self.link_of[i] = link
                self.lane_of[i] = lane
                self.pos[i] = 0.0
                self.speed[i] = v_in
                self.prev_v[i] = v_in
                self.ridx[i] = 0
                self.enter_time[i] = self.t

    def step(self) -> None:
        """Advance one second."""
        cfg, g = self.cfg, self.graph
        t = self.t
        self._depart()
        self._enter()

        K.gate_kernel(t, self.q, self.q_head, self.q_cnt, self.lane_link, g.length, g.link_to, self.link_lane0,
                      g.lanes, self.blocked, self.reserved, self.node_grants, cfg.node_cap, self.pos, self.speed,
                      self.vlen, self.s0, self.bcomf, self.granted, self.glane, self.held, self.route, self.rlen,
                      self.ridx, cfg.grant_time, cfg.grant_min, cfg.sight)

        act = np.flatnonzero(self.status == K.ACTIVE)
        if len(act):
            n = self.n
            gap = np.full(n, K.NO_LEADER)
            lead_v = np.zeros(n)
            target = np.full(n, np.nan)
            tdist = np.zeros(n)
            K.leaders_kernel(self.q, self.q_head, self.q_cnt, self.lane_link, g.length, g.ffs, self.pos,
                             self.speed, self.vlen, self.s0, self.granted, self.glane, self.held, self.route, self.ridx,
                             self.next_speed, gap, lead_v, target, tdist)
            v = self.speed[act]
            a = K.idm_accel_array(v, self.v0(act), gap[act], v - lead_v[act], self.T[act], self.s0[act],
                                  self.amax[act], self.bcomf[act], cfg.b_max, np.ones(len(act), dtype=np.bool_))
            if cfg.eco_driving:
                a, emergency = eco_filter_batch(a, v, target[act], tdist[act], cfg.eco.a_eco, cfg.eco.b_eco,
                                                cfg.eco.lookahead, cfg.eco.mode, gap=gap[act],
                                                leader_speed=lead_v[act], s0=self.s0[act])
                self.emergencies += int(emergency.sum())
            self.acc[act] = a

        arrived = K.integrate_kernel(t, self.q, self.q_head, self.q_cnt, self.lane_link, g.length, self.pos,
                                     self.speed, self.acc, self.vlen, self.s0, self.status, self.link_of,
                                     self.lane_of, self.granted, self.glane, self.reserved, self.route, self.rlen,
                                     self.ridx, self.odo, self.arr_time, self.prev_v, self.disp, self.start_link,
                                     self.veh_sec, self.dist_acc, self.crossed, self.n_crossed, self.clamps)
        self.n_arrived += arrived

        if len(act):
            self._account(act)
            if np.any(self.disp[act] > 1e-6):
                self._last_move_t = t
        if self.n_departed != self.n_waiting + self.n_active + self.n_arrived:
            self.count_violations += 1
        self.t = t + 1
        if self.t % cfg.interval_s == 0:
            self._close_interval()

    def _account(self, act: np.ndarray) -> None:
        """Emissions, braking energy and trajectory records for the second just simulated."""
        v = self.speed[act]
        a = self.acc[act]
        rates = fleet_rates(self.em_params, v, a, np.ones(len(act), dtype=np.bool_))
        self.ghg[act] += rates[:, 0]
        self.nox[act] += rates[:, 1]
        self.energy[act] += rates[:, 2]
        links = self.start_link[act]
        sec = self.t % self.cfg.interval_s
        nl = self.graph.n_links
        em = self.link_em[:, sec, :]
        em[:, 0] += np.bincount(links, weights=rates[:, 0], minlength=nl)
        em[:, 1] += np.bincount(links, weights=rates[:, 1], minlength=nl)
        self.link_occ[:, sec] += np.bincount(links, minlength=nl)

        S = self.disp[act]
        j = S - self.prev_v[act]
        c = DEFAULT_RESISTANCE
        self.brake_energy[act] += braking_energy_kernel(S, j, self.mass_kg[act], c.b0, c.b1, c.b2, c.delta)
        self.prev_v[act] = S

        if self.trajectories is not None:
            self.trajectories.append((self.t, self.vid[act].copy(), self.graph.link_ids[links].copy(),
                                      v.copy(), a.copy(), S.copy()))

    def _close_interval(self) -> None:
        cfg, g = self.cfg, self.graph
        speed, density, flow = interval_states(g, self.veh_sec, self.dist_acc, cfg.interval_s,
                                               cfg.per_lane_density)
        occ = self.link_occ > 0
        per = np.maximum(self.link_occ, 1.0)[:, :, None] if cfg.er_per_vehicle else 1.0
        em = self.link_em / per
        ghg_er = link_space_mean_er_batch(em[:, :, 0], occ)
        nox_er = link_space_mean_er_batch(em[:, :, 1], occ)
        self.link_em_total += self.link_em.sum(axis=1)
        self.history.append(speed, density, flow, ghg_er, nox_er)
        self.next_speed = speed
        self.veh_sec[:] = 0.0
        self.dist_acc[:] = 0.0
        self.link_em[:] = 0.0
        self.link_occ[:] = 0.0
        interval = self.t // cfg.interval_s - 1
        self.router.on_interval(self, interval)

    def flush(self) -> None:
        """Fold a partial final interval into the run totals."""
        self.link_em_total += self.link_em.sum(axis=1)
        self.link_em[:] = 0.0

    # -- inspection ----------------------------------------------------------

    def vehicle_state(self, i: int) -> VehicleState:
        link = self.link_of[i]
        return VehicleState(
            vehicle_id=int(self.vid[i]),
            link_id=int(self.graph.link_ids[link]) if link >= 0 else -1,
            position=float(self.pos[i]) if link >= 0 else 0.0,
            speed=float(self.speed[i]),
            accel=float(self.acc[i]),
            route=tuple(self.route_link_ids(i)),
            arrived=bool(self.status[i] == K.ARRIVED),
            odometer=float(self.odo[i]),
            clock_entered=float(self.enter_time[i]),
        )

    def check_invariants(self) -> None:
        """Raise if vehicles overlap, speeds are negative or counts leak."""
        if self.n_departed != self.n_waiting + self.n_active + self.n_arrived:
            raise SimulationError("vehicle count not conserved")
        if np.any(self.speed < 0):
            raise SimulationError("negative speed")
        cap = self.q.shape[1]
        for lane in np.flatnonzero(self.q_cnt > 1):
            idx = self.q[lane, (self.q_head[lane] + np.arange(self.q_cnt[lane])) % cap]
            gaps = self.pos[idx[:-1]] - self.vlen[idx[:-1]] - self.pos[idx[1:]]
            if np.any(gaps <= 0):
                raise SimulationError(f"collision on lane {lane} at t={self.t}")

    def stuck_links(self) -> list[int]:
        act = np.flatnonzero((self.status == K.ACTIVE) & (self.speed < 0.1))
        links = np.unique(self.link_of[act])
        return [int(self.graph.link_ids[k]) for k in links]

    def trajectory_records(self) -> list[TrajectoryRecord]:
        out = []
        for t, vids, links, v, a, _ in self.trajectories or []:
            out.extend(TrajectoryRecord(int(i), int(t), int(l), float(s), float(x))
                       for i, l, s, x in zip(vids, links, v, a))
        return out


def step_simulation(world: World, dt: float = 1.0) -> World:
    if dt != world.cfg.dt:
        raise ValueError("the time step is fixed at 1 s")
    world.step()
    return world


def run_until_empty(world: World, max_t: int | None = None, check: bool = False) -> SimulationResult:
    """Step until every vehicle has arrived, or stop with a gridlock report.

    Gridlock is declared at ``max_t`` or when no vehicle has moved for
    ``stall_s`` seconds while some are still on the network.
    """
    max_t = world.cfg.max_t if max_t is None else max_t
    report = None
    while world.n_arrived < world.n:
        if world.t >= max_t or (world.n_active and world.t - world._last_move_t > world.cfg.stall_s):
            report = GridlockReport(world.t, world.n - world.n_arrived, world.stuck_links())
            log.warning("%s", report)
            break
        world.step()
        if check:
            world.check_invariants()
    world.flush()
    return SimulationResult(world.t, report, world.trajectory_records() if world.trajectories is not None else None,
                            world)


def write_trajectories(world: World, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "t", "link", "speed_mps", "accel_mps2"])
        for t, vids, links, v, a, _ in world.trajectories or []:
            for row in zip(vids, [t] * len(vids), links, v, a):
                w.writerow([int(row[0]), int(row[1]), int(row[2]), f"{row[3]:.6f}", f"{row[4]:.6f}"])


__all__ = [
    "B_MAX", "CAV_IDM", "HDV_IDM", "FreeFlowRouter", "GridlockReport", "IDMParams", "SimConfig",
    "SimulationError", "SimulationResult", "TrajectoryRecord", "VehicleState", "World",
    "idm_acceleration", "run_until_empty", "step_simulation", "write_trajectories",
]
