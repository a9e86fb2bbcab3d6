"""
Observation encoding and the reward functions.

Observation layout for an intersection with P phases (fixed per template):

    [0, P)            one-hot of the active phase
    [P, P+16)         moving vehicles: 8 incoming slots then 8 outgoing slots
    [P+16, P+32)      stopped (queued) vehicles, same slot order

Incoming slots run over sides N, E, S, W and roles T, L; outgoing slots
list the lanes reached by leaving on each side (empty slots read 0).
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from ..flow_model import effective_discharge
from ..lyapunov import capped_flows, phase_pressure, saturation_flows
from ..net_model import Intersection, Network, NetworkState

N_SLOTS = 16


def observation_layout(node: Intersection) -> List[Tuple[str, Optional[str]]]:
    """(feature, lane id) for every vector index; lane is None where unused."""
    slots = list(node.incoming) + list(node.outgoing)
    if len(slots) != N_SLOTS:
        raise ValueError(f"intersection {node.id} does not match the 16-slot template")
    layout = [("phase", pid) for pid in node.phases]
    layout += [("moving", lid) for lid in slots]
    layout += [("stopped", lid) for lid in slots]
    return layout


def obs_length(node: Intersection) -> int:
    return len(node.phases) + 2 * N_SLOTS


def _counts(sim, lid: str) -> Tuple[float, float]:
    if isinstance(sim, NetworkState):
        return sim.moving_count.get(lid, 0.0), sim.queue.get(lid, 0.0)
    if lid not in sim.moving:
        return 0.0, 0.0
    return float(len(sim.moving[lid])), float(len(sim.queued[lid]))


def encode_state(node: Intersection, sim, active_phase: str, scale: float = 1.0) -> np.ndarray:
    """Observation vector of one intersection.

    ``sim`` is a Simulation (vehicle counts) or a NetworkState (PCE amounts).
    """
    slots = list(node.incoming) + list(node.outgoing)
    x = np.zeros(obs_length(node))
    x[node.phases.index(active_phase)] = 1.0
    p = len(node.phases)
    for k, lid in enumerate(slots):
        if lid is None:
            continue
        moving, stopped = _counts(sim, lid)
        x[p + k] = moving * scale
        x[p + N_SLOTS + k] = stopped * scale
    return x


# -- rewards -----------------------------------------------------------------

def _phase_total(v: Union[float, Mapping[str, float], Iterable[float]]) -> float:
    if isinstance(v, Mapping):
        return float(sum(v.values()))
    if isinstance(v, (int, float)):
        return float(v)
    return float(sum(v))


def reward_flow(phase_flows: Mapping[str, Union[float, Mapping[str, float]]]) -> float:
    """-sum over phases of |sum of the phase's movement flows|."""
    return -sum(abs(_phase_total(v)) for v in phase_flows.values())


def reward_pressure(pressures: Mapping[str, float]) -> float:
    """-sum over phases of |D_phase|."""
    return -sum(abs(d) for d in pressures.values())


def reward_waiting_time(stopped_seconds: float) -> float:
    """-(vehicle-seconds spent stopped during the decision interval)."""
    return -float(stopped_seconds)


def reward_queue(queues: Iterable[float]) -> float:
    """-(mean lane queue)."""
    q = list(queues)
    return -float(np.mean(q)) if q else 0.0


def counterfactual_flows(network: Network, node: Intersection, state: NetworkState,
                         arrival_rates: Optional[Mapping[str, float]] = None,
                         dt: float = 1.0) -> Dict[str, Dict[str, float]]:
    """Per phase, movement rates (PCE/s) if that phase were green now."""
    rates = arrival_rates or {}
    out = {}
    for pid in node.phases:
        flows = {}
        for mid in network.phases[pid].movements:
            m = network.movements[mid]
            flows[mid] = effective_discharge(m, state, network, True, dt,
                                             rates.get(m.from_lane, 0.0)) / dt
        out[pid] = flows
    return out


def phase_pressures(network: Network, node: Intersection, state: NetworkState,
                    weighting: str = "greenshields") -> Dict[str, float]:
    """D for every phase; ``weighting`` is "greenshields" (BP) or "saturation" (MP)."""
    out = {}
    for pid in node.phases:
        phase = network.phases[pid]
        if weighting == "greenshields":
            z = capped_flows(network, state, phase)
        elif weighting == "saturation":
            z = saturation_flows(network, phase)
        else:
            raise ValueError(f"unknown weighting {weighting!r}")
        out[pid] = phase_pressure(state, phase, z, network)
    return out
