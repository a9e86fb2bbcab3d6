"""
Discrete-time closed loop over the fluid queue model.

Each step runs, in order: arrivals onto entry lanes, free-flow travel to
the stop line, controller polling and the timing machine, FIFO discharge
of green lanes, the fluid queue update and a metrics row.  Vehicles are
tracked individually for delay; the per-lane fluid backlog is checked
against the PCE sum of queued vehicles every step.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .controllers import (Controller, Decision, Interval, SignalState, SignalTimingRules,
                          apply_timing, make_controller)
from .flow_model import (DemandSpec, RouteSampler, VehicleKind, generate_arrivals,
                         queue_update, receiving_flow)
from .lyapunov import (DriftReport, StabilityEstimate, StabilityTrace, lyapunov_linear,
                       lyapunov_quadratic, stability_estimate)
from .net_model import Network, NetworkState

log = logging.getLogger(__name__)

_EPS = 1e-9


class IntegrityError(RuntimeError):
    """An engine invariant was violated; always a bug."""


class Position(Enum):
    MOVING = "moving"
    QUEUED = "queued"
    EXITED = "exited"


@dataclass
class Vehicle:
    id: int
    kind: VehicleKind
    route: tuple
    spawn_time: float
    eta: float = 0.0  # arrival at the stop line of the current lane
    leg: int = 0  # index of the current lane in ``route``
    stopped_time: float = 0.0
    queued_since: Optional[float] = None
    exit_time: Optional[float] = None

    @property
    def pce(self) -> float:
        return self.kind.pce

    @property
    def lane(self) -> str:
        return self.route[self.leg]

    @property
    def position(self) -> Position:
        if self.exit_time is not None:
            return Position.EXITED
        return Position.QUEUED if self.queued_since is not None else Position.MOVING


@dataclass
class EpisodeConfig:
    network: Network
    demand: DemandSpec
    controller: Union[str, Controller] = "back-pressure"
    controller_params: dict = field(default_factory=dict)
    horizon: float = 3600.0
    dt: float = 1.0
    seed: int = 0
    warmup: float = 300.0
    rules: SignalTimingRules = field(default_factory=SignalTimingRules)
    truck_headway_factor: float = 1.0  # extra discharge cost per truck PCE
    record_rows: bool = False

    def __post_init__(self):
        if not self.horizon > self.warmup >= 0:
            raise ValueError("need horizon > warmup >= 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.truck_headway_factor < 1.0:
            raise ValueError("truck_headway_factor must be >= 1")


@dataclass
class MetricsReport:
    avg_vehicle_delay: float
    delay_vehicles: int  # vehicles counted in the delay average
    no_vehicles: bool  # warning flag: nothing to average
    throughput: int  # vehicles exited over the whole episode
    spawned: int
    mean_queue: Dict[str, float]
    max_queue: Dict[str, float]
    L_linear: np.ndarray
    L_quadratic: np.ndarray
    delta: np.ndarray
    total_queue: np.ndarray
    stability: StabilityEstimate
    green_lengths: List[float]
    amber_changes: int
    rows: List[dict] = field(default_factory=list)
    columns: List[str] = field(default_factory=list)

    def drift_reports(self) -> Iterable[DriftReport]:
        for a, b, c in zip(self.L_linear, self.L_quadratic, self.delta):
            yield DriftReport(float(a), float(b), float(c))

    def summary(self) -> dict:
        s = self.stability
        return {
            "avg_vehicle_delay": self.avg_vehicle_delay,
            "delay_vehicles": self.delay_vehicles,
            "throughput": self.throughput,
            "spawned": self.spawned,
            "mean_total_queue": float(self.total_queue.mean()) if len(self.total_queue) else 0.0,
            "B": s.B,
            "epsilon": s.epsilon,
            "bound": s.avg_queue_bound,
            "measured_avg_queue": s.measured_time_avg_queue,
            "bound_holds": s.bound_holds,
            "growing": s.growing,
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(sorted(self.summary().items())).encode())
        for arr in (self.L_linear, self.L_quadratic, self.delta, self.total_queue):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr(self.green_lengths).encode())
        return h.hexdigest()


def compute_avg_delay(vehicles: Iterable[Vehicle], warmup: float = 0.0) -> float:
    """Mean stopped time over exited vehicles spawned at or after ``warmup``.

    Returns 0 when no vehicle qualifies (and logs a warning).
    """
    times = [v.stopped_time for v in vehicles
             if v.exit_time is not None and v.spawn_time >= warmup]
    if not times:
        log.warning("no exited vehicles to average; delay reported as 0")
        return 0.0
    return math.fsum(times) / len(times)


class Simulation:
    def __init__(self, config: EpisodeConfig, controller: Optional[Controller] = None):
        self.config = config
        self.network = config.network
        self.demand = config.demand
        self.rules = config.rules
        self.dt = config.dt
        self.rng = np.random.default_rng(config.seed)
        self.router = RouteSampler(self.network)
        if controller is None:
            controller = (config.controller if isinstance(config.controller, Controller)
                          else make_controller(config.controller, **config.controller_params))
        self.controller = controller
        net = self.network
        self.state = NetworkState.empty(net)
        self.time = 0.0
        self.vehicles: List[Vehicle] = []
        self._internal = [lid for lid, l in net.lanes.items() if not l.is_exit]
        self._entries = sorted((l for l in net.lanes.values() if l.is_entry), key=lambda l: l.id)
        self.moving: Dict[str, Deque[Vehicle]] = {lid: deque() for lid in self._internal}
        self.queued: Dict[str, Deque[Vehicle]] = {lid: deque() for lid in self._internal}
        self.queued_pce: Dict[str, float] = {lid: 0.0 for lid in self._internal}
        self.carry: Dict[str, float] = {lid: 0.0 for lid in self._internal}
        self._phase_lanes = {pid: tuple(net.phase_lanes(pid)) for pid in net.phases}
        self._node_incoming = {nid: tuple(net.incoming_lanes(nid)) for nid in net.intersections}
        self.exited = 0
        self.last_joined: Dict[str, float] = {}
        self.last_outflow: Dict[str, float] = {}
        # vehicle-seconds spent queued on each intersection's approaches
        self.stopped_seconds: Dict[str, float] = {nid: 0.0 for nid in net.intersections}
        self.step_reward: Optional[float] = None
        self.trace = StabilityTrace()
        self.green_lengths: List[float] = []
        self.amber_changes = 0
        self._l1: List[float] = []
        self._l2: List[float] = []
        self._delta: List[float] = []
        self._queue_sum = {lid: 0.0 for lid in self._internal}
        self._queue_max = {lid: 0.0 for lid in self._internal}
        self._metric_steps = 0
        self.rows: List[dict] = []
        self.controller.reset(self)
        self.signals: Dict[str, SignalState] = {
            nid: self.controller.initial_signal(self, node)
            for nid, node in net.intersections.items()
        }

    # -- test hooks -----------------------------------------------------------
    def inject_vehicle(self, route: Sequence[str], kind: VehicleKind = VehicleKind.CAR) -> Vehicle:
        """Place a vehicle at the upstream end of ``route[0]`` at the current time."""
        lane = self.network.lanes[route[0]]
        v = Vehicle(len(self.vehicles), kind, tuple(route), self.time,
                    eta=self.time + lane.travel_time)
        self.vehicles.append(v)
        self.moving[lane.id].append(v)
        self.state.moving_count[lane.id] += v.pce
        return v

    # -- the step ---------------------------------------------------------------
    def step(self) -> None:
        t, dt = self.time, self.dt
        net, st, rules = self.network, self.state, self.rules
        joined: Dict[str, float] = defaultdict(float)
        l2_before = lyapunov_quadratic(st)
        q_before = lyapunov_linear(st)

        # (1) arrivals
        for lane in self._entries:
            for arr in generate_arrivals(self.demand, lane, dt, self.rng, self.router):
                v = Vehicle(len(self.vehicles), arr.kind, arr.route, t, eta=t + lane.travel_time)
                self.vehicles.append(v)
                self.moving[lane.id].append(v)
                st.moving_count[lane.id] += v.pce

        # (2) free-flow travel to the stop line
        for lid, dq in self.moving.items():
            while dq and dq[0].eta <= t + _EPS:
                v = dq.popleft()
                st.moving_count[lid] -= v.pce
                v.queued_since = t
                self.queued[lid].append(v)
                self.queued_pce[lid] += v.pce
                joined[lid] += v.pce

        # (3) controller polling and timing, applied atomically
        new_signals = {}
        for nid, node in net.intersections.items():
            sig = self.signals[nid]
            decision = None
            if self.controller.poll_due(self, sig):
                exclude = (sig.active_phase,) if sig.elapsed >= rules.max_green - _EPS else ()
                phase = self.controller.decide(self, node, exclude)
                decision = Decision.of(nid, phase, sig.active_phase)
            requery = partial(self.controller.decide, self, node, (sig.active_phase,))
            new = apply_timing(sig, decision, rules, dt, requery)
            self._check_transition(sig, new)
            new_signals[nid] = new
        self.signals = new_signals

        # (4) + (5) FIFO discharge on served lanes
        out: Dict[str, float] = defaultdict(float)
        served = set()
        for sig in self.signals.values():
            if sig.interval is Interval.GREEN:
                frac = 1.0
            elif sig.interval is Interval.YELLOW and rules.yellow_discharge > 0:
                frac = rules.yellow_discharge
            else:
                continue
            for lid in self._phase_lanes[sig.active_phase]:
                served.add(lid)
                self._discharge_lane(lid, frac, t, out)
        for lid in self._internal:
            if lid not in served:
                self.carry[lid] = 0.0

        # (6) fluid update, cross-checked against the vehicles
        for lid in self._internal:
            lane = net.lanes[lid]
            j = joined.get(lid, 0.0)
            new_q = queue_update(st.queue[lid], out.get(lid, 0.0),
                                 0.0 if lane.is_entry else j, j if lane.is_entry else 0.0,
                                 lane.capacity)
            if abs(new_q - self.queued_pce[lid]) > 1e-9:
                raise IntegrityError(f"fluid/discrete mismatch on {lid} at t={t}: "
                                     f"{new_q} vs {self.queued_pce[lid]}")
            st.queue[lid] = new_q
        for nid, lanes in self._node_incoming.items():
            self.stopped_seconds[nid] += dt * sum(len(self.queued[l]) for l in lanes)
        in_net = sum(len(d) for d in self.moving.values()) + sum(len(d) for d in self.queued.values())
        if in_net + self.exited != len(self.vehicles):
            raise IntegrityError(f"vehicle conservation broken at t={t}")

        # (7) metrics
        l1, l2 = lyapunov_linear(st), lyapunov_quadratic(st)
        total_in = math.fsum(v for k, v in joined.items() if not net.lanes[k].is_entry)
        total_a = math.fsum(v for k, v in joined.items() if net.lanes[k].is_entry)
        self.trace.append(q_before, l2 - l2_before, math.fsum(out.values()), total_in, total_a)
        self._l1.append(l1)
        self._l2.append(l2)
        self._delta.append(l2 - l2_before)
        if t >= self.config.warmup - _EPS:
            self._metric_steps += 1
            for lid in self._internal:
                q = st.queue[lid]
                self._queue_sum[lid] += q
                if q > self._queue_max[lid]:
                    self._queue_max[lid] = q
        self.last_joined = dict(joined)
        self.last_outflow = dict(out)
        self.time = t + dt
        st.time = self.time
        self.step_reward = None
        self.controller.after_step(self)
        if self.config.record_rows:
            self.rows.append(self._row(t, l1, l2, l2 - l2_before))

    def _discharge_lane(self, lid: str, frac: float, t: float, out: Dict[str, float]) -> None:
        q = self.queued[lid]
        if not q:
            self.carry[lid] = 0.0
            return
        net, st = self.network, self.state
        lane = net.lanes[lid]
        rate = lane.saturation_flow
        head_next = net.lanes[self._next_lane(q[0])]
        if not head_next.is_exit:
            rate = min(rate, receiving_flow(st.density(head_next), head_next.free_flow_speed,
                                            head_next.jam_density))
        budget = self.carry[lid] + rate * self.dt * frac
        factor = self.config.truck_headway_factor
        while q:
            v = q[0]
            cost = v.pce * (factor if v.kind is VehicleKind.TRUCK else 1.0)
            if cost > budget + _EPS:
                break
            nxt = net.lanes[self._next_lane(v)]
            if not nxt.is_exit and (self.queued_pce[nxt.id] + st.moving_count[nxt.id] + v.pce
                                    > nxt.capacity + _EPS):
                break  # spillback blocks the whole lane
            q.popleft()
            budget -= cost
            self.queued_pce[lid] -= v.pce
            out[lid] += v.pce
            v.stopped_time += t - v.queued_since
            v.queued_since = None
            if nxt.is_exit:
                v.leg += 1
                v.exit_time = t
                self.exited += 1
            else:
                v.leg += 1
                v.eta = t + nxt.travel_time
                self.moving[nxt.id].append(v)
                st.moving_count[nxt.id] += v.pce
        if q:
            head = q[0]
            head_cost = head.pce * (factor if head.kind is VehicleKind.TRUCK else 1.0)
            self.carry[lid] = min(max(budget, 0.0), head_cost)
        else:
            self.carry[lid] = 0.0
        if abs(self.queued_pce[lid]) < 1e-12:
            self.queued_pce[lid] = 0.0

    def _next_lane(self, v: Vehicle) -> str:
        if v.leg + 1 >= len(v.route):
            raise IntegrityError(f"vehicle {v.id} ran out of route on {v.lane}")
        return v.route[v.leg + 1]

    def _check_transition(self, prev: SignalState, new: SignalState) -> None:
        r = self.rules
        if prev.interval is Interval.GREEN and new.interval is not Interval.GREEN:
            g = prev.elapsed
            if not (r.min_green - _EPS <= g <= r.max_green + _EPS):
                raise IntegrityError(f"green of {g} s outside [{r.min_green}, {r.max_green}]")
            self.green_lengths.append(g)
        elif prev.interval is Interval.YELLOW and new.interval is not Interval.YELLOW:
            if abs(prev.elapsed - r.yellow) > _EPS:
                raise IntegrityError(f"yellow lasted {prev.elapsed} s")
            if r.all_red > 0 and new.interval is not Interval.ALL_RED:
                raise IntegrityError("yellow not followed by all-red")
            if r.all_red == 0:
                self.amber_changes += 1
        elif prev.interval is Interval.ALL_RED and new.interval is not Interval.ALL_RED:
            if abs(prev.elapsed - r.all_red) > _EPS:
                raise IntegrityError(f"all-red lasted {prev.elapsed} s")
            if new.interval is not Interval.GREEN or new.active_phase != prev.pending_phase:
                raise IntegrityError("all-red must hand over to the pending green")
            if new.active_phase == prev.active_phase:
                raise IntegrityError("amber inserted without a phase change")
            self.amber_changes += 1

    # -- output -------------------------------------------------------------------
    def columns(self) -> List[str]:
        return (["time", "L_linear", "L_quadratic", "delta", "total_queue", "reward"]
                + [f"phase:{nid}" for nid in sorted(self.network.intersections)]
                + [f"q:{lid}" for lid in sorted(self._internal)])

    def _row(self, t: float, l1: float, l2: float, delta: float) -> dict:
        row = {"time": t, "L_linear": l1, "L_quadratic": l2, "delta": delta,
               "total_queue": l1, "reward": "" if self.step_reward is None else self.step_reward}
        for nid in sorted(self.network.intersections):
            s = self.signals[nid]
            row[f"phase:{nid}"] = s.active_phase if s.interval is Interval.GREEN else \
                f"{s.active_phase}/{s.interval.value}"
        for lid in sorted(self._internal):
            row[f"q:{lid}"] = self.state.queue[lid]
        return row

    def run(self) -> MetricsReport:
        n = int(round(self.config.horizon / self.dt))
        for _ in range(n):
            self.step()
        return self.report()

    def report(self) -> MetricsReport:
        steps = max(self._metric_steps, 1)
        total_queue = np.asarray(self.trace.total_queue, dtype=float)
        stab = stability_estimate(self.trace) if len(self.trace) else \
            StabilityEstimate(0.0, 0.0, math.inf, 0.0, degenerate=True)
        delay = compute_avg_delay(self.vehicles, self.config.warmup)
        counted = sum(1 for v in self.vehicles
                      if v.exit_time is not None and v.spawn_time >= self.config.warmup)
        return MetricsReport(
            avg_vehicle_delay=delay,
            delay_vehicles=counted,
            no_vehicles=counted == 0,
            throughput=self.exited,
            spawned=len(self.vehicles),
            mean_queue={l: s / steps for l, s in self._queue_sum.items()},
            max_queue=dict(self._queue_max),
            L_linear=np.asarray(self._l1),
            L_quadratic=np.asarray(self._l2),
            delta=np.asarray(self._delta),
            total_queue=total_queue,
            stability=stab,
            green_lengths=list(self.green_lengths),
            amber_changes=self.amber_changes,
            rows=self.rows,
            columns=self.columns() if self.config.record_rows else [],
        )


def run_episode(config: EpisodeConfig, controller: Optional[Controller] = None) -> MetricsReport:
    return Simulation(config, controller).run()


def write_metrics_csv(path, report: MetricsReport) -> None:
    """Per-step CSV.  Columns: time, L_linear, L_quadratic, delta, total_queue,
    reward (blank unless an RL controller logged one), phase:<node> (active
    phase, suffixed /yellow or /all_red during clearance), q:<lane> (PCE)."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=report.columns)
        w.writeheader()
        for row in report.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
