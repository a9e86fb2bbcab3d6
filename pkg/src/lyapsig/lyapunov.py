"""
Lyapunov functions, drifts, pressures and the stability estimate.

Two congestion measures are used:

    linear      L1(Q) = sum_l Q_l
    quadratic   L2(Q) = sum_l Q_l^2 / 2

Minimising the one-step drift of L1 favours the phase discharging the most
flow (the DORAS family); minimising the drift of L2 favours the phase with
the largest flow-weighted queue differential (max/back pressure).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .flow_model import FlowRates, discharge_cap
from .net_model import Movement, Network, NetworkState, Phase


@dataclass
class DriftReport:
    L_linear: float
    L_quadratic: float
    delta: float
    per_phase_drift: Dict[str, float] = field(default_factory=dict)


@dataclass
class StabilityEstimate:
    B: float
    epsilon: float
    avg_queue_bound: float
    measured_time_avg_queue: float
    degenerate: bool = False
    growing: bool = False

    @property
    def strongly_stable(self) -> bool:
        return self.epsilon > 0

    @property
    def bound_holds(self) -> bool:
        return self.epsilon > 0 and self.measured_time_avg_queue <= self.avg_queue_bound


def lyapunov_linear(state: NetworkState) -> float:
    return math.fsum(abs(q) for q in state.queue.values())


def lyapunov_quadratic(state: NetworkState) -> float:
    return math.fsum(q * q for q in state.queue.values()) / 2.0


def lyapunov_waiting_time(state: NetworkState, network: Network) -> float:
    """Queue-squared over 8x the lane discharge rate; reporting only."""
    return math.fsum(q * q / (8.0 * network.lanes[lid].saturation_flow)
                     for lid, q in state.queue.items() if q > 0)


def _net_change(flows: FlowRates, lane: str) -> float:
    return (flows.inflow.get(lane, 0.0) + flows.arrivals.get(lane, 0.0)
            - flows.outflow.get(lane, 0.0))


def _lanes_of(flows: FlowRates) -> set:
    return set(flows.inflow) | set(flows.arrivals) | set(flows.outflow)


def drift_linear(state: NetworkState, flows: FlowRates) -> float:
    """Sum over lanes of inflow + arrivals - outflow."""
    return math.fsum(_net_change(flows, lane) for lane in sorted(_lanes_of(flows)))


def drift_quadratic(state: NetworkState, flows: FlowRates) -> float:
    """sum_l [c_l^2 / 2 + Q_l c_l] with c_l the net change of lane l.

    Exact one-step change of L2 when no queue hits the zero clamp.
    """
    total = []
    for lane in sorted(_lanes_of(flows)):
        c = _net_change(flows, lane)
        total.append(0.5 * c * c + state.queue.get(lane, 0.0) * c)
    return math.fsum(total)


def exit_weight(network: Network, movement: Movement) -> float:
    """Drift derivative of L1 w.r.t. the movement flow: -1 when the flow
    leaves the network, 0 when it stays inside."""
    return -1.0 if network.lanes[movement.to_lane].is_exit else 0.0


def movement_pressure(state: NetworkState, movement: Movement,
                      network: Optional[Network] = None) -> float:
    """Upstream minus downstream backlog; exits count as empty."""
    up = state.queue[movement.from_lane]
    if network is not None and network.lanes[movement.to_lane].is_exit:
        return up
    return up - state.queue.get(movement.to_lane, 0.0)


def phase_pressure(state: NetworkState, phase: Phase, flows: Mapping[str, float],
                   network: Network) -> float:
    """Flow-weighted pressure of a phase: sum of W_ab * z_ab over its movements.

    ``flows`` maps movement id to z_ab in PCE/s.
    """
    total = 0.0
    for mid in phase.movements:
        z = flows.get(mid, 0.0)
        if z == 0.0:
            continue
        total += movement_pressure(state, network.movements[mid], network) * z
    return total


def saturation_flows(network: Network, phase: Phase) -> Dict[str, float]:
    return {mid: network.movements[mid].saturation_flow for mid in phase.movements}


def capped_flows(network: Network, state: NetworkState, phase: Phase) -> Dict[str, float]:
    """z_ab = min(saturation, Greenshields supply of the receiving lane)."""
    return {mid: discharge_cap(network, state, network.movements[mid]) for mid in phase.movements}


def phase_drift_value(state: NetworkState, phase: Phase, flows: Mapping[str, float],
                      network: Network, next_state: Optional[NetworkState] = None) -> float:
    """Drift contribution of giving ``phase`` the green.

    Pushing z_ab from l_a to l_b changes L2 at rate z_ab (Q_b - Q_a), with
    queues taken one step ahead.  Without ``next_state`` the current queues
    stand in for the next-step ones, which makes this -phase_pressure.
    """
    ref = next_state if next_state is not None else state
    total = 0.0
    for mid in phase.movements:
        z = flows.get(mid, 0.0)
        if z == 0.0:
            continue
        total -= movement_pressure(ref, network.movements[mid], network) * z
    return total


def one_step_ahead(state: NetworkState, network: Network, phase: Phase,
                   flows: Mapping[str, float], dt: float,
                   arrivals: Optional[Mapping[str, float]] = None) -> NetworkState:
    """Queues after running ``phase`` for one step at rates ``flows``."""
    nxt = state.copy()
    for mid in phase.movements:
        m = network.movements[mid]
        amount = flows.get(mid, 0.0) * dt
        nxt.queue[m.from_lane] = max(nxt.queue[m.from_lane] - amount, 0.0)
        if not network.lanes[m.to_lane].is_exit:
            nxt.queue[m.to_lane] = nxt.queue.get(m.to_lane, 0.0) + amount
    for lane, a in (arrivals or {}).items():
        nxt.queue[lane] = nxt.queue.get(lane, 0.0) + a
    nxt.time = state.time + dt
    return nxt


def drift_report(state: NetworkState, previous_l2: Optional[float] = None,
                 per_phase: Optional[Dict[str, float]] = None) -> DriftReport:
    l2 = lyapunov_quadratic(state)
    delta = 0.0 if previous_l2 is None else l2 - previous_l2
    return DriftReport(lyapunov_linear(state), l2, delta, per_phase or {})


# -- stability -------------------------------------------------------------

def drift_bound_constant(z_out_max: float, z_in_max: float, a_max: float) -> float:
    return z_out_max ** 2 + (z_in_max + a_max) ** 2


@dataclass
class StabilityTrace:
    """Per-step network totals collected by the engine.

    ``total_queue[t]`` and ``delta[t]`` refer to the state at the start of
    step t and the change of L2 over that step; flows are network totals
    in PCE per step.
    """

    total_queue: list = field(default_factory=list)
    delta: list = field(default_factory=list)
    outflow: list = field(default_factory=list)
    inflow: list = field(default_factory=list)
    arrivals: list = field(default_factory=list)

    def append(self, total_queue, delta, outflow, inflow, arrivals):
        self.total_queue.append(total_queue)
        self.delta.append(delta)
        self.outflow.append(outflow)
        self.inflow.append(inflow)
        self.arrivals.append(arrivals)

    def __len__(self):
        return len(self.total_queue)


def queue_growing(total_queue: Sequence[float], blocks: int = 4, rel_tol: float = 0.0) -> bool:
    """True when block means of the final third strictly increase."""
    n = len(total_queue)
    tail = np.asarray(total_queue[n - n // 3:], dtype=float)
    if len(tail) < blocks:
        return False
    means = [float(b.mean()) for b in np.array_split(tail, blocks)]
    return all(b > a * (1 + rel_tol) for a, b in zip(means, means[1:]))


def stability_estimate(trace: StabilityTrace) -> StabilityEstimate:
    """Fit the drift condition Delta <= B - eps * sum(Q) to one trajectory.

    B uses the largest network-total step flows observed; eps is the
    smallest slack (B - Delta_t) / sum(Q_t) over steps with queued traffic,
    floored at zero.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    B = drift_bound_constant(max(trace.outflow), max(trace.inflow), max(trace.arrivals))
    q = np.asarray(trace.total_queue, dtype=float)
    d = np.asarray(trace.delta, dtype=float)
    mask = q > 0
    measured = float(q.mean())
    growing = queue_growing(trace.total_queue)
    if B <= 0 or not mask.any():
        return StabilityEstimate(B, 0.0, math.inf, measured, degenerate=True, growing=growing)
    eps = max(float(np.min((B - d[mask]) / q[mask])), 0.0)
    bound = B / eps if eps > 0 else math.inf
    return StabilityEstimate(B, eps, bound, measured, degenerate=False, growing=growing)
