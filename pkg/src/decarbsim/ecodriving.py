"""Driving-interval energy indices and the eco-driving acceleration filter.

Intervals follow the speedometer method: each interval of length ``t_i``
covers ``S_i`` metres, from which the mean velocity and acceleration are
derived and the interval is classified as acceleration, deceleration, steady
movement or stop. Braking energy is the kinetic energy removed beyond what
road and wind resistance would have taken during free rolling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._jit import jit

PHASES = ("acceleration", "deceleration", "steady", "stop")


@dataclass(frozen=True)
class ResistanceCoeffs:
    b0: float = 0.175
    b1: float = -5.63e-4
    b2: float = 2.68e-4
    delta: float = 1.05  # rotational-inertia coefficient
    psi: float = 0.015  # road resistance coefficient the b's were fitted for

    def __post_init__(self):
        if self.delta < 1:
            raise ValueError("rotational-inertia coefficient must be >= 1")
        if self.b0 <= 0:
            raise ValueError("b0 must be positive")


DEFAULT_RESISTANCE = ResistanceCoeffs()


@dataclass(frozen=True)
class DrivingInterval:
    t_i: float
    S_i: float
    V_i: float
    j_i: float
    phase: str


@dataclass(frozen=True)
class EnergyIndices:
    accel_energy: float
    braking_energy: float
    steady_energy: float
    total_wheel_energy: float


def kinematics_from_distance(S_i: float, t_i: float, V_prev: float) -> tuple[float, float]:
    """Mean velocity and acceleration of one interval.

    Uses ``j = (V_i - V_prev) / t_i`` so that speeding up is positive.
    """
    if t_i <= 0:
        raise ValueError("interval length must be positive")
    if S_i < 0:
        raise ValueError("distance must be non-negative")
    V = S_i / t_i
    return V, (V - V_prev) / t_i


def classify_phase(V: float, j: float, tol: float = 1e-9) -> str:
    if abs(j) <= tol:
        return "stop" if V <= tol else "steady"
    return "acceleration" if j > 0 else "deceleration"


def make_interval(S_i: float, t_i: float, V_prev: float) -> DrivingInterval:
    V, j = kinematics_from_distance(S_i, t_i, V_prev)
    return DrivingInterval(t_i, S_i, V, j, classify_phase(V, j))


def resistance_decel(V: float, c: ResistanceCoeffs = DEFAULT_RESISTANCE) -> float:
    """Free-rolling deceleration from road and wind resistance (m/s^2, negative)."""
    if V < 0:
        raise ValueError("speed must be non-negative")
    return -(c.b0 + c.b1 * V + c.b2 * V * V)


def braking_energy(interval: DrivingInterval, mass_kg: float, c: ResistanceCoeffs = DEFAULT_RESISTANCE) -> float:
    """Energy dissipated by the brakes over one interval (J).

    Zero outside deceleration phases and when the vehicle slows no faster
    than free rolling would.
    """
    if interval.phase != "deceleration":
        return 0.0
    e = -c.delta * mass_kg * interval.S_i * (interval.j_i - resistance_decel(interval.V_i, c))
    return max(e, 0.0)


@jit
def braking_energy_kernel(S, j, mass_kg, b0, b1, b2, delta):
    """Vectorised braking energy for 1 s intervals (S = V numerically)."""
    n = S.shape[0]
    out = np.zeros(n)
    for i in range(n):
        if j[i] < -1e-9:
            V = S[i]
            jr = -(b0 + b1 * V + b2 * V * V)
            e = -delta * mass_kg[i] * S[i] * (j[i] - jr)
            if e > 0.0:
                out[i] = e
    return out


def energy_indices(distances, mass_kg: float, t_i: float = 1.0, c: ResistanceCoeffs = DEFAULT_RESISTANCE,
                   V0: float = 0.0) -> EnergyIndices:
    """Energy indices of a distance-per-interval trace.

    Acceleration energy is the inertial work of speeding up
    (``delta * m * S * j``), steady energy the resistance work while
    cruising, and the total the sum of acceleration and steady work plus the
    resistance work done during acceleration.
    """
    acc = brk = steady = total = 0.0
    V_prev = V0
    for S in distances:
        iv = make_interval(float(S), t_i, V_prev)
        res_work = -resistance_decel(iv.V_i, c) * mass_kg * iv.S_i
        if iv.phase == "acceleration":
            e = c.delta * mass_kg * iv.S_i * iv.j_i
            acc += e
            total += e + res_work
        elif iv.phase == "deceleration":
            brk += braking_energy(iv, mass_kg, c)
        elif iv.phase == "steady":
            steady += res_work
            total += res_work
        V_prev = iv.V_i
    return EnergyIndices(acc, brk, steady, total)


# -- eco-driving filter --------------------------------------------------------


@dataclass(frozen=True)
class EcoParams:
    a_eco: float = 1.3
    b_eco: float = 1.5
    lookahead: bool = True
    mode: str = "coast"  # "coast": roll out on resistance only; "decel": brake to the target

    def __post_init__(self):
        if self.mode not in ("coast", "decel"):
            raise ValueError(f"unknown eco mode {self.mode!r}")
        if self.a_eco <= 0 or self.b_eco <= 0:
            raise ValueError("eco limits must be positive")


def _needs_hard_brake(v, gap, leader_speed, s0, b_eco):
    """True when braking at ``b_eco`` cannot shed the closing speed before the gap shrinks to ``s0``."""
    closing = np.maximum(v - leader_speed, 0.0)
    room = gap - s0
    return (room <= 0.0) | (closing * closing > 2.0 * b_eco * np.maximum(room, 1e-9))


def eco_filter(accel_command: float, v: float, params: EcoParams = EcoParams(),
               target_speed: float | None = None, distance: float | None = None,
               gap: float | None = None, leader_speed: float = 0.0, s0: float = 2.0) -> tuple[float, bool]:
    """Smooth an acceleration command; returns (accel, emergency flag).

    The command is clipped to ``[-b_eco, a_eco]``. A command harder than
    ``-b_eco`` is an emergency and passes through untouched when braking at
    ``b_eco`` could not resolve the conflict with the obstacle ``gap`` metres
    ahead (moving at ``leader_speed``); without a gap every such command is
    treated as an emergency.

    When a slower speed ``target_speed`` lies ``distance`` metres ahead the
    vehicle stops pressing on: in "coast" mode it rolls out on road and air
    resistance alone (never harder than the deceleration actually needed,
    and leaving any real braking to the car-following law); in "decel" mode
    it decelerates uniformly to reach the target exactly at the hazard.
    """
    if accel_command < -params.b_eco and (gap is None or _needs_hard_brake(v, gap, leader_speed, s0, params.b_eco)):
        return accel_command, True
    a = min(max(accel_command, -params.b_eco), params.a_eco)
    if params.lookahead and target_speed is not None and distance is not None and v > target_speed:
        a_need = (target_speed * target_speed - v * v) / (2.0 * max(distance, 1.0))
        floor = resistance_decel(v) if params.mode == "coast" else -params.b_eco
        a = min(a, max(a_need, floor))
    return a, False


def eco_filter_batch(accel, v, target, distance, a_eco, b_eco, lookahead=True, mode="coast",
                     c: ResistanceCoeffs = DEFAULT_RESISTANCE, gap=None, leader_speed=None, s0=None):
    """Array form of :func:`eco_filter`; ``target`` is NaN where no hazard."""
    emergency = accel < -b_eco
    if gap is not None:
        emergency &= _needs_hard_brake(v, gap, leader_speed, s0, b_eco)
    a = np.clip(accel, -b_eco, a_eco)
    if lookahead:
        hazard = np.isfinite(target) & (v > target)
        a_need = (np.where(hazard, target, 0.0) ** 2 - v * v) / (2.0 * np.maximum(distance, 1.0))
        floor = -(c.b0 + c.b1 * v + c.b2 * v * v) if mode == "coast" else -b_eco
        a = np.where(hazard, np.minimum(a, np.maximum(a_need, floor)), a)
    return np.where(emergency, accel, a), emergency


# -- stop-and-go fixture ---------------------------------------------------------


@dataclass(frozen=True)
class StopAndGoResult:
    braking_energy: float  # J
    distance: float  # m driven by the follower
    max_abs_accel: float
    emergencies: int
    min_gap: float


def _leader_speed(t: float, period: float, v_peak: float) -> float:
    return 0.5 * v_peak * (1.0 - np.cos(2.0 * np.pi * t / period))


def stop_and_go(eco: EcoParams | None = None, period: float = 60.0, v_peak: float = 15.0,
                duration: int = 600, mass_kg: float = 1480.0, initial_gap: float = 55.0) -> StopAndGoResult:
    """One IDM follower behind a leader cycling smoothly between 0 and ``v_peak``.

    The leader's speed is ``v_peak/2 * (1 - cos(2 pi t / period))``. While
    the leader slows down it announces where it will come to rest, which is
    the downstream slowdown signal the eco filter acts on. Braking energy is
    summed over 1 s intervals of the follower's trajectory.
    """
    from .dynamics import HDV_IDM, IDMParams, VehicleState, idm_acceleration

    p = IDMParams(v0=16.67, T=HDV_IDM.T, s0=HDV_IDM.s0, a_max=HDV_IDM.a_max, b=HDV_IDM.b)
    length = 5.0
    xl, vl = initial_gap + length, 0.0
    x = v = prev_s = 0.0
    energy = max_a = 0.0
    emergencies = 0
    min_gap = np.inf
    for t in range(duration):
        vl_next = _leader_speed(t + 1, period, v_peak)
        gap = xl - length - x
        min_gap = min(min_gap, gap)
        a = idm_acceleration(VehicleState(0, 0, 0.0, v), VehicleState(1, 0, 0.0, vl), p, gap=gap)
        if eco is not None:
            target = distance = None
            if vl_next < vl:
                # remaining leader travel until its next standstill, by the trapezoid rule
                stop_t = np.ceil(t / period) * period
                ts = np.arange(t, stop_t + 1.0)
                vs = _leader_speed(ts, period, v_peak)
                rest = xl + float(np.sum(0.5 * (vs[1:] + vs[:-1])))
                target, distance = 0.0, rest - length - p.s0 - x
            a, flag = eco_filter(a, v, eco, target, distance, gap=gap, leader_speed=vl, s0=p.s0)
            emergencies += flag
        a = max(a, -v)  # no reversing within the step
        s = v + 0.5 * a
        x += s
        v = max(v + a, 0.0)
        xl += 0.5 * (vl + vl_next)
        vl = vl_next
        energy += braking_energy(make_interval(s, 1.0, prev_s), mass_kg)
        prev_s = s
        max_a = max(max_a, abs(a))
    return StopAndGoResult(float(energy), float(x), float(max_a), emergencies, float(min_gap))
