"""
Traffic dynamics: demand, vehicle classes, Greenshields flow and the
per-lane fluid queue update.

All flows are in PCE (passenger-car equivalents).  Rates are PCE/s,
amounts over a step are PCE.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .net_model import Lane, Movement, Network, NetworkState

# (major, minor) approach volumes in veh/h
DEMAND_LEVELS = {
    "low": (500.0, 200.0),
    "medium": (900.0, 300.0),
    "high": (1300.0, 400.0),
}


class VehicleKind(Enum):
    CAR = "car"
    TRUCK = "truck"

    @property
    def pce(self) -> float:
        return PCE[self]


PCE = {VehicleKind.CAR: 1.0, VehicleKind.TRUCK: 2.0}


@dataclass(frozen=True)
class DemandSpec:
    level: str
    major_rate: float  # veh/h per approach
    minor_rate: float
    truck_share: float = 0.0

    def __post_init__(self):
        if self.major_rate < 0 or self.minor_rate < 0:
            raise ValueError("demand rates must be >= 0")
        if not 0.0 <= self.truck_share <= 1.0:
            raise ValueError("truck_share must lie in [0, 1]")

    @classmethod
    def from_level(cls, level: str, truck_share: float = 0.0, scale: float = 1.0) -> "DemandSpec":
        try:
            major, minor = DEMAND_LEVELS[level.lower()]
        except KeyError:
            raise ValueError(f"unknown demand level {level!r}") from None
        return cls(level.lower(), major * scale, minor * scale, truck_share)

    def rate_for(self, lane: Lane) -> float:
        """veh/h arriving on an entry lane."""
        base = self.major_rate if lane.road == "major" else self.minor_rate
        return base * lane.demand_share


@dataclass
class FlowRates:
    """Flows over one step: per-movement discharge and per-lane totals."""

    movement: Dict[str, float] = field(default_factory=dict)
    inflow: Dict[str, float] = field(default_factory=dict)
    outflow: Dict[str, float] = field(default_factory=dict)
    arrivals: Dict[str, float] = field(default_factory=dict)


def greenshields_flow(density: float, v_f: float, d_jam: float) -> float:
    """Greenshields flow q = v_f d - (v_f / d_jam) d^2, zero beyond jam."""
    if density < 0:
        raise ValueError("density must be >= 0")
    if density >= d_jam:
        return 0.0
    return max(v_f * density - (v_f / d_jam) * density * density, 0.0)


def receiving_flow(density: float, v_f: float, d_jam: float) -> float:
    """Largest rate a lane at ``density`` can absorb.

    On the uncongested side of the parabola the lane takes its full
    capacity v_f d_jam / 4; past the critical density the Greenshields
    flow itself is the limit, falling to zero at jam.
    """
    if density <= d_jam / 2:
        return v_f * d_jam / 4
    return greenshields_flow(density, v_f, d_jam)


def discharge_cap(network: Network, state: NetworkState, movement: Movement) -> float:
    """Movement rate limit: saturation flow, capped by downstream Greenshields supply."""
    down = network.lanes[movement.to_lane]
    if down.is_exit:
        return movement.saturation_flow
    supply = receiving_flow(state.density(down), down.free_flow_speed, down.jam_density)
    return min(movement.saturation_flow, supply)


def effective_discharge(movement: Movement, state: NetworkState, network: Network,
                        active: bool, dt: float, arrival_rate: float = 0.0) -> float:
    """PCE the movement can discharge in one step of length ``dt``.

    ``arrival_rate`` is the PCE/s reaching the stop line of the from-lane;
    it is the whole flow source when the lane has no queue.  The movement
    gets its turning share of the lane's queue and arrivals.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if not active:
        return 0.0
    share = network.turning_ratios.get(movement.from_lane, {}).get(movement.id, 1.0)
    queue = state.queue[movement.from_lane] * share
    arriving = max(arrival_rate, 0.0) * share * dt
    cap = discharge_cap(network, state, movement)
    if queue > 0:
        amount = min(cap * dt, queue + arriving)
    else:
        amount = min(arriving, cap * dt)
    spare = state.spare(network.lanes[movement.to_lane])
    return max(min(amount, spare), 0.0)


def queue_update(backlog: float, outflow: float, inflow: float, arrivals: float,
                 capacity: float = math.inf) -> float:
    """One-step lane queue update, max-clamped at zero and at ``capacity``."""
    if outflow < 0 or inflow < 0 or arrivals < 0:
        raise ValueError("flows must be >= 0")
    return min(max(backlog - outflow + inflow + arrivals, 0.0), capacity)


def arrival_mean(rate_vph: float, dt: float) -> float:
    return rate_vph * dt / 3600.0


class RouteSampler:
    """Samples lane sequences by walking the turning ratios to an exit."""

    def __init__(self, network: Network, max_hops: int = 64):
        self.network = network
        self.max_hops = max_hops
        self._table: Dict[str, Tuple[List[float], List[str]]] = {}
        for lid, ratios in network.turning_ratios.items():
            cum, targets, acc = [], [], 0.0
            for mid in network._from_lane[lid]:
                acc += ratios[mid]
                cum.append(acc)
                targets.append(network.movements[mid].to_lane)
            cum[-1] = 1.0
            self._table[lid] = (cum, targets)

    def sample(self, entry: str, rng: np.random.Generator) -> Tuple[str, ...]:
        route = [entry]
        lane = entry
        while not self.network.lanes[lane].is_exit:
            if len(route) > self.max_hops:
                # cycling route: leave by the first exit-bound movement found
                lane = self._nearest_exit(lane)
                route.append(lane)
                continue
            cum, targets = self._table[lane]
            lane = targets[bisect.bisect_left(cum, rng.random())]
            route.append(lane)
        return tuple(route)

    def _nearest_exit(self, lane: str) -> str:
        cum, targets = self._table[lane]
        for t in targets:
            if self.network.lanes[t].is_exit:
                return t
        return targets[0]


@dataclass(frozen=True)
class Arrival:
    kind: VehicleKind
    route: Tuple[str, ...]


def generate_arrivals(demand: DemandSpec, entry_lane: Lane, dt: float,
                      rng: np.random.Generator,
                      router: Optional[RouteSampler] = None) -> List[Arrival]:
    """Poisson arrivals on one entry lane over one step.

    Every vehicle consumes one uniform draw for its class whatever the
    truck share, so runs differing only in truck share see the same
    arrival instants and routes.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    lam = arrival_mean(demand.rate_for(entry_lane), dt)
    if lam <= 0:
        return []
    n = int(rng.poisson(lam))
    out = []
    for _ in range(n):
        kind = VehicleKind.TRUCK if rng.random() < demand.truck_share else VehicleKind.CAR
        route = router.sample(entry_lane.id, rng) if router else (entry_lane.id,)
        out.append(Arrival(kind, route))
    return out
