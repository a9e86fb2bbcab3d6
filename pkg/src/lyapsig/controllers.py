"""
Signal timing state machine and the non-learning controllers.

Every controller only *requests* a phase; ``apply_timing`` enforces minimum
and maximum green and inserts the yellow + all-red clearance between two
greens.  Controllers are polled when the current green has run at least
``min_green`` and then every ``decision_interval`` seconds.

Tie-breaking everywhere: keep the current phase if it ties for the best
score, otherwise take the first best phase in the intersection's order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .flow_model import DemandSpec, receiving_flow
from .net_model import ConfigurationError, Intersection, Network, NetworkState


@dataclass(frozen=True)
class SignalTimingRules:
    min_green: float = 5.0
    max_green: float = 50.0
    yellow: float = 3.0
    all_red: float = 2.0
    decision_interval: float = 5.0
    yellow_discharge: float = 0.0  # fraction of saturation flow served in yellow

    def __post_init__(self):
        if not 0 < self.min_green <= self.max_green:
            raise ConfigurationError("need 0 < min_green <= max_green")
        if self.yellow < 0 or self.all_red < 0 or self.decision_interval <= 0:
            raise ConfigurationError("yellow/all_red must be >= 0, decision_interval > 0")
        if not 0.0 <= self.yellow_discharge <= 1.0:
            raise ConfigurationError("yellow_discharge must lie in [0, 1]")

    @property
    def amber(self) -> float:
        return self.yellow + self.all_red


class Interval(Enum):
    GREEN = "green"
    YELLOW = "yellow"
    ALL_RED = "all_red"


@dataclass(frozen=True)
class SignalState:
    """Signal of one intersection.

    ``elapsed`` counts the seconds of ``interval`` completed so far.
    """

    active_phase: str
    interval: Interval = Interval.GREEN
    elapsed: float = 0.0
    pending_phase: Optional[str] = None


@dataclass(frozen=True)
class Decision:
    intersection: str
    phase: str
    switch: bool

    @classmethod
    def of(cls, intersection: str, phase: str, current: str) -> "Decision":
        return cls(intersection, phase, phase != current)


_EPS = 1e-9


def apply_timing(signal: SignalState, decision: Optional[Decision], rules: SignalTimingRules,
                 dt: float, requery: Optional[Callable[[], str]] = None) -> SignalState:
    """Advance one intersection's signal by a step of length ``dt``.

    Returns the state in force during the step, with ``elapsed`` already
    including it.  A switch request before ``min_green`` is ignored; at
    ``max_green`` the phase is forced out using ``requery`` (which must
    return a phase other than the active one).
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    e = signal.elapsed
    if signal.interval is Interval.GREEN:
        if e >= rules.max_green - _EPS:
            target = decision.phase if decision is not None and decision.switch else None
            if target is None or target == signal.active_phase:
                if requery is None:
                    raise RuntimeError("max green reached and no re-query available")
                target = requery()
            if target == signal.active_phase:
                raise RuntimeError("re-query returned the active phase at max green")
            return _enter_clearance(signal, target, rules, dt)
        if (decision is not None and decision.switch and decision.phase != signal.active_phase
                and e >= rules.min_green - _EPS):
            return _enter_clearance(signal, decision.phase, rules, dt)
        return replace(signal, elapsed=e + dt)
    if signal.interval is Interval.YELLOW:
        if e >= rules.yellow - _EPS:
            if rules.all_red > 0:
                return replace(signal, interval=Interval.ALL_RED, elapsed=dt)
            return SignalState(signal.pending_phase, Interval.GREEN, dt, None)
        return replace(signal, elapsed=e + dt)
    # all-red
    if e >= rules.all_red - _EPS:
        return SignalState(signal.pending_phase, Interval.GREEN, dt, None)
    return replace(signal, elapsed=e + dt)


def _enter_clearance(signal: SignalState, target: str, rules: SignalTimingRules,
                     dt: float) -> SignalState:
    if rules.yellow > 0:
        return SignalState(signal.active_phase, Interval.YELLOW, dt, target)
    if rules.all_red > 0:
        return SignalState(signal.active_phase, Interval.ALL_RED, dt, target)
    return SignalState(target, Interval.GREEN, dt, None)


def choose_phase(phases: Sequence[str], scores: Mapping[str, float], current: str,
                 exclude: Iterable[str] = (), fixed_sequence: bool = False) -> str:
    """Best-scoring phase with the keep-current / lowest-index tie-break.

    With ``fixed_sequence`` only the current phase and its successor are
    compared.
    """
    excluded = set(exclude)
    if fixed_sequence:
        nxt = phases[(phases.index(current) + 1) % len(phases)]
        if current in excluded:
            return nxt
        return nxt if scores[nxt] > scores[current] else current
    candidates = [p for p in phases if p not in excluded]
    if not candidates:
        raise ValueError("every phase excluded")
    best = max(scores[p] for p in candidates)
    if current in candidates and scores[current] == best:
        return current
    return next(p for p in candidates if scores[p] == best)


# -- pressure-type scores ---------------------------------------------------

def _queue_diff(network: Network, state: NetworkState, mid: str) -> Tuple[float, str]:
    m = network.movements[mid]
    down = network.lanes[m.to_lane]
    w = state.queue[m.from_lane] - (0.0 if down.is_exit else state.queue[m.to_lane])
    return w, m.to_lane


def max_pressure_scores(network: Network, node: Intersection,
                        state: NetworkState) -> Dict[str, float]:
    """Per phase: sum of (Q_a - Q_b) * saturation flow."""
    scores = {}
    for pid in node.phases:
        total = 0.0
        for mid in network.phases[pid].movements:
            w, _ = _queue_diff(network, state, mid)
            total += w * network.movements[mid].saturation_flow
        scores[pid] = total
    return scores


def back_pressure_scores(network: Network, node: Intersection,
                         state: NetworkState) -> Dict[str, float]:
    """Per phase: sum of (Q_a - Q_b) * min(saturation, downstream supply)."""
    supply: Dict[str, float] = {}
    scores = {}
    for pid in node.phases:
        total = 0.0
        for mid in network.phases[pid].movements:
            m = network.movements[mid]
            w, to = _queue_diff(network, state, mid)
            down = network.lanes[to]
            if down.is_exit:
                z = m.saturation_flow
            else:
                if to not in supply:
                    supply[to] = receiving_flow(state.density(down), down.free_flow_speed,
                                                down.jam_density)
                z = min(m.saturation_flow, supply[to])
            total += w * z
        scores[pid] = total
    return scores


def max_pressure_decide(network: Network, node: Intersection, state: NetworkState,
                        current: str, exclude: Iterable[str] = ()) -> Decision:
    scores = max_pressure_scores(network, node, state)
    phase = choose_phase(node.phases, scores, current, exclude, node.fixed_sequence)
    return Decision.of(node.id, phase, current)


def back_pressure_decide(network: Network, node: Intersection, state: NetworkState,
                         current: str, exclude: Iterable[str] = ()) -> Decision:
    scores = back_pressure_scores(network, node, state)
    phase = choose_phase(node.phases, scores, current, exclude, node.fixed_sequence)
    return Decision.of(node.id, phase, current)


# -- DORAS-Q ------------------------------------------------------------------

class ArrivalRateTracker:
    """Exponentially weighted stop-line arrival rate per lane (PCE/s)."""

    def __init__(self, lanes: Iterable[str], time_constant: float = 120.0):
        self.time_constant = time_constant
        self.rate: Dict[str, float] = {lid: 0.0 for lid in lanes}

    def update(self, arrived: Mapping[str, float], dt: float) -> None:
        alpha = min(dt / self.time_constant, 1.0)
        for lid, r in self.rate.items():
            x = arrived.get(lid, 0.0) / dt
            self.rate[lid] = r + alpha * (x - r)


def doras_q_scores(network: Network, node: Intersection, state: NetworkState,
                   history: ArrivalRateTracker, horizon: float) -> Dict[str, float]:
    """Expected PCE discharged by each phase over the next ``horizon`` seconds."""
    scores = {}
    for pid in node.phases:
        total = 0.0
        for mid in network.phases[pid].movements:
            m = network.movements[mid]
            share = network.turning_ratios[m.from_lane][mid]
            expected = (state.queue[m.from_lane] + history.rate.get(m.from_lane, 0.0) * horizon) * share
            total += min(expected, m.saturation_flow * horizon)
        scores[pid] = total
    return scores


def doras_q_decide(network: Network, node: Intersection, state: NetworkState,
                   history: ArrivalRateTracker, current: str,
                   rules: SignalTimingRules = SignalTimingRules(),
                   exclude: Iterable[str] = ()) -> Decision:
    scores = doras_q_scores(network, node, state, history, rules.decision_interval)
    phase = choose_phase(node.phases, scores, current, exclude, node.fixed_sequence)
    return Decision.of(node.id, phase, current)


# -- fixed time ---------------------------------------------------------------

@dataclass(frozen=True)
class FixedTimePlan:
    """Cyclic plan of (phase, green seconds); ``amber`` follows every green."""

    greens: Tuple[Tuple[str, float], ...]
    amber: float = 5.0

    def __post_init__(self):
        if not self.greens:
            raise ConfigurationError("fixed-time plan is empty")

    @property
    def cycle(self) -> float:
        return sum(g for _, g in self.greens) + self.amber * len(self.greens)

    def locate(self, local_time: float) -> Tuple[int, Interval, float]:
        """(phase index, interval, seconds into it) at ``local_time``."""
        tau = local_time % self.cycle
        for k, (_, g) in enumerate(self.greens):
            if tau < g - _EPS:
                return k, Interval.GREEN, tau
            tau -= g
            if tau < self.amber - _EPS:
                return k, Interval.YELLOW, tau
            tau -= self.amber
        return 0, Interval.GREEN, 0.0

    def phase_at(self, local_time: float) -> str:
        """Phase that should hold (or be heading to) the green."""
        k, interval, _ = self.locate(local_time)
        if interval is not Interval.GREEN:
            k = (k + 1) % len(self.greens)
        return self.greens[k][0]

    def signal_at(self, local_time: float, rules: SignalTimingRules) -> SignalState:
        k, interval, into = self.locate(local_time)
        phase = self.greens[k][0]
        if interval is Interval.GREEN:
            return SignalState(phase, Interval.GREEN, into)
        nxt = self.greens[(k + 1) % len(self.greens)][0]
        if into < rules.yellow - _EPS:
            return SignalState(phase, Interval.YELLOW, into, nxt)
        return SignalState(phase, Interval.ALL_RED, into - rules.yellow, nxt)


def fixed_time_decide(plans: Mapping[str, FixedTimePlan], offsets: Mapping[str, float],
                      clock: float) -> Dict[str, str]:
    """Scheduled phase of every intersection at ``clock``.

    An offset delays the start of the intersection's cycle.
    """
    return {node: plan.phase_at(clock - offsets.get(node, 0.0)) for node, plan in plans.items()}


def fixed_time_plans(network: Network, demand: DemandSpec,
                     rules: SignalTimingRules = SignalTimingRules(),
                     min_cycle: float = 40.0, max_cycle: float = 150.0,
                     ) -> Tuple[Dict[str, FixedTimePlan], Dict[str, float]]:
    """Webster-style splits and green-wave offsets along the major road.

    Greens are proportional to each phase's critical flow ratio, so with
    equal saturation flows the major:minor split follows the demand ratio.
    One common cycle keeps the corridor coordinated; the offset of column c
    is the free-flow travel time from column 0.
    """
    mean_pce = 1.0 + demand.truck_share  # trucks weigh 2.0
    ratios: Dict[str, Dict[str, float]] = {}
    for nid, node in network.intersections.items():
        ratios[nid] = {}
        for pid in node.phases:
            y = 0.0
            for lid in network.phase_lanes(pid):
                lane = network.lanes[lid]
                rate = demand.major_rate if lane.road == "major" else demand.minor_rate
                share = _role_share(network, lane.role)
                y = max(y, rate * share * mean_pce / 3600.0 / lane.saturation_flow)
            ratios[nid][pid] = y
    n_phases = max(len(n.phases) for n in network.intersections.values())
    lost = n_phases * rules.amber
    Y = max(sum(r.values()) for r in ratios.values())
    if Y < 0.95:
        cycle = (1.5 * lost + 5.0) / (1.0 - Y)
    else:
        cycle = max_cycle
    cycle = min(max(cycle, min_cycle), max_cycle)
    plans = {}
    for nid, node in network.intersections.items():
        total_y = sum(ratios[nid].values()) or 1.0
        green_time = cycle - lost
        greens = []
        for pid in node.phases:
            g = green_time * ratios[nid][pid] / total_y
            g = float(min(max(round(g), rules.min_green), rules.max_green))
            greens.append((pid, g))
        plans[nid] = FixedTimePlan(tuple(greens), rules.amber)
    # pad every plan to the longest cycle so that the corridor stays in step
    common = max(p.cycle for p in plans.values())
    for nid, plan in plans.items():
        slack = common - plan.cycle
        if slack > 0:
            greens = list(plan.greens)
            # give the slack to the major through phase, splitting if max_green binds
            k = next((i for i, (pid, _) in enumerate(greens)
                      if network.phases[pid].name == "EW-through"), 0)
            pid, g = greens[k]
            extra = min(slack, rules.max_green - g)
            greens[k] = (pid, g + extra)
            plans[nid] = FixedTimePlan(tuple(greens), plan.amber)
    geom = network.geometry
    travel = (geom.link_length / geom.free_flow_speed) if geom else 0.0
    offsets = {nid: (node.position[1] * travel) % plans[nid].cycle
               for nid, node in network.intersections.items()}
    return plans, offsets


def _role_share(network: Network, role: str) -> float:
    g = network.geometry
    if g is None:
        return 1.0
    return g.p_left if role == "L" else g.p_through + g.p_right


# -- engine-facing controller objects ----------------------------------------

class Controller:
    """Base class for controllers plugged into the simulator.

    ``sim`` is a :class:`lyapsig.sim_engine.Simulation`.
    """

    name = "base"

    def reset(self, sim) -> None:
        pass

    def initial_signal(self, sim, node: Intersection) -> SignalState:
        return SignalState(node.phases[0], Interval.GREEN, 0.0)

    def poll_due(self, sim, signal: SignalState) -> bool:
        if signal.interval is not Interval.GREEN:
            return False
        r = sim.rules
        e = signal.elapsed
        if e < r.min_green - _EPS:
            return False
        k = (e - r.min_green) / r.decision_interval
        return abs(k - round(k)) * r.decision_interval < sim.dt / 2 or e >= r.max_green - _EPS

    def decide(self, sim, node: Intersection, exclude: Iterable[str] = ()) -> str:
        raise NotImplementedError

    def after_step(self, sim) -> None:
        pass


class MaxPressureController(Controller):
    name = "max-pressure"

    def decide(self, sim, node, exclude=()):
        current = sim.signals[node.id].active_phase
        return max_pressure_decide(sim.network, node, sim.state, current, exclude).phase


class BackPressureController(Controller):
    name = "back-pressure"

    def decide(self, sim, node, exclude=()):
        current = sim.signals[node.id].active_phase
        return back_pressure_decide(sim.network, node, sim.state, current, exclude).phase


class DorasQController(Controller):
    name = "doras-q"

    def __init__(self, time_constant: float = 120.0):
        self.time_constant = time_constant
        self.history: Optional[ArrivalRateTracker] = None

    def reset(self, sim):
        self.history = ArrivalRateTracker(sim.network.lanes, self.time_constant)

    def decide(self, sim, node, exclude=()):
        current = sim.signals[node.id].active_phase
        return doras_q_decide(sim.network, node, sim.state, self.history, current,
                              sim.rules, exclude).phase

    def after_step(self, sim):
        self.history.update(sim.last_joined, sim.dt)


class FixedTimeController(Controller):
    name = "fixed"

    def __init__(self, plans: Optional[Dict[str, FixedTimePlan]] = None,
                 offsets: Optional[Dict[str, float]] = None):
        self.plans = plans
        self.offsets = offsets

    def reset(self, sim):
        if self.plans is None:
            self.plans, self.offsets = fixed_time_plans(sim.network, sim.demand, sim.rules)
        self.offsets = self.offsets or {}

    def initial_signal(self, sim, node):
        return self.plans[node.id].signal_at(-self.offsets.get(node.id, 0.0), sim.rules)

    def poll_due(self, sim, signal):
        return signal.interval is Interval.GREEN

    def decide(self, sim, node, exclude=()):
        phase = self.plans[node.id].phase_at(sim.time - self.offsets.get(node.id, 0.0))
        if phase in set(exclude):
            phases = node.phases
            phase = phases[(phases.index(phase) + 1) % len(phases)]
        return phase


BASELINE_CONTROLLERS = {
    "fixed": FixedTimeController,
    "doras-q": DorasQController,
    "max-pressure": MaxPressureController,
    "back-pressure": BackPressureController,
}
RL_CONTROLLERS = ("rl-wt", "rl-q", "rl-mp", "rl-bp")
CONTROLLER_NAMES = tuple(BASELINE_CONTROLLERS) + RL_CONTROLLERS


def make_controller(name: str, **kwargs) -> Controller:
    try:
        cls = BASELINE_CONTROLLERS[name]
    except KeyError:
        if name in RL_CONTROLLERS:
            raise ValueError(f"{name} needs a trained agent; use rl_agent.RLController") from None
        raise ValueError(f"unknown controller {name!r}") from None
    return cls(**kwargs)
