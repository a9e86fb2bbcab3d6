"""
Scenario files (YAML) with strict validation.

Schema (every key optional except ``topology``):

    topology: arterial-4 | grid-3x3 | {kind: arterial, n: 4} | {kind: grid, rows: 3, cols: 3}
    geometry: {link_length, entry_length, free_flow_speed, jam_density,
               saturation_flow, major_through_lanes, minor_through_lanes,
               left_lanes, p_through, p_left, p_right, fixed_sequence}
    demand: low | medium | high | {level: high, scale: 2.0}
    truck_share: 0 | 0.10 | 0.25 | 0.40
    controller: fixed | doras-q | max-pressure | back-pressure | rl-wt | rl-q | rl-mp | rl-bp
    timing: {min_green, max_green, yellow, all_red, decision_interval, yellow_discharge}
    agent: {checkpoint: path, config: {AgentConfig fields}, reward: kind}
    training: {episodes, horizon, warmup}
    horizon: 3600
    warmup: 300
    dt: 1.0
    truck_headway_factor: 1.0
    seeds: [0, 1, 2, 3, 4]
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import yaml

from ..controllers import CONTROLLER_NAMES, SignalTimingRules
from ..flow_model import DEMAND_LEVELS, DemandSpec
from ..net_model import LaneGeometry, Network, build_arterial, build_grid
from ..rl_agent import ALL_REWARDS, AgentConfig

TRUCK_SHARES = (0.0, 0.10, 0.25, 0.40)

TOP_KEYS = {"topology", "geometry", "demand", "truck_share", "controller", "timing", "agent",
            "training", "horizon", "warmup", "dt", "truck_headway_factor", "seeds"}
AGENT_KEYS = {"checkpoint", "config", "reward"}
TRAINING_KEYS = {"episodes", "horizon", "warmup"}


class ScenarioError(ValueError):
    """Malformed scenario; the message names the offending key."""


def _check_keys(data: dict, allowed: set, where: str) -> None:
    if not isinstance(data, dict):
        raise ScenarioError(f"{where}: expected a mapping")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ScenarioError(f"{where}: unknown key {unknown[0]!r}")


def _dataclass_kwargs(cls, data: dict, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    _check_keys(data, names, where)
    return dict(data)


@dataclass(frozen=True)
class Topology:
    kind: str  # "arterial" or "grid"
    rows: int = 1
    cols: int = 1

    @property
    def label(self) -> str:
        return f"arterial-{self.cols}" if self.kind == "arterial" else f"grid-{self.rows}x{self.cols}"

    def build(self, geometry: Optional[LaneGeometry] = None) -> Network:
        if self.kind == "arterial":
            return build_arterial(self.cols, geometry)
        return build_grid(self.rows, self.cols, geometry)


def parse_topology(value: Any) -> Topology:
    if isinstance(value, str):
        m = re.fullmatch(r"arterial-(\d+)", value)
        if m:
            return Topology("arterial", 1, int(m.group(1)))
        m = re.fullmatch(r"grid-(\d+)x(\d+)", value)
        if m:
            return Topology("grid", int(m.group(1)), int(m.group(2)))
        raise ScenarioError(f"topology: cannot parse {value!r}")
    if isinstance(value, dict):
        kind = value.get("kind")
        if kind == "arterial":
            _check_keys(value, {"kind", "n"}, "topology")
            return Topology("arterial", 1, _positive_int(value.get("n"), "topology.n"))
        if kind == "grid":
            _check_keys(value, {"kind", "rows", "cols"}, "topology")
            return Topology("grid", _positive_int(value.get("rows"), "topology.rows"),
                            _positive_int(value.get("cols"), "topology.cols"))
        raise ScenarioError("topology.kind: expected 'arterial' or 'grid'")
    raise ScenarioError("topology: expected a string or mapping")


def _positive_int(v, where: str) -> int:
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        raise ScenarioError(f"{where}: expected an integer >= 1")
    return v


def _number(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{where}: expected a number")
    return float(v)


def parse_demand(value: Any, truck_share: float) -> DemandSpec:
    if isinstance(value, str):
        if value.lower() not in DEMAND_LEVELS:
            raise ScenarioError(f"demand: unknown level {value!r}")
        return DemandSpec.from_level(value, truck_share)
    if isinstance(value, dict):
        _check_keys(value, {"level", "scale"}, "demand")
        level = value.get("level")
        if not isinstance(level, str) or level.lower() not in DEMAND_LEVELS:
            raise ScenarioError(f"demand.level: unknown level {level!r}")
        scale = _number(value.get("scale", 1.0), "demand.scale")
        if scale < 0:
            raise ScenarioError("demand.scale: must be >= 0")
        return DemandSpec.from_level(level, truck_share, scale)
    raise ScenarioError("demand: expected a level name or mapping")


def parse_truck_share(value: Any) -> float:
    share = _number(value, "truck_share")
    for allowed in TRUCK_SHARES:
        if abs(share - allowed) < 1e-12:
            return allowed
    raise ScenarioError(f"truck_share: must be one of {TRUCK_SHARES}")


@dataclass
class Scenario:
    topology: Topology
    geometry: LaneGeometry = field(default_factory=LaneGeometry)
    demand: DemandSpec = field(default_factory=lambda: DemandSpec.from_level("medium"))
    controller: str = "back-pressure"
    rules: SignalTimingRules = field(default_factory=SignalTimingRules)
    agent_config: AgentConfig = field(default_factory=AgentConfig)
    checkpoint: Optional[str] = None
    reward: Optional[str] = None
    train_episodes: int = 50
    train_horizon: float = 1800.0
    train_warmup: float = 300.0
    horizon: float = 3600.0
    warmup: float = 300.0
    dt: float = 1.0
    truck_headway_factor: float = 1.0
    seeds: Tuple[int, ...] = (0,)

    def network(self) -> Network:
        return self.topology.build(self.geometry)

    @property
    def is_rl(self) -> bool:
        return self.controller.startswith("rl-")


def parse_scenario(data: Any) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("scenario: expected a mapping at top level")
    _check_keys(data, TOP_KEYS, "scenario")
    if "topology" not in data:
        raise ScenarioError("topology: required key missing")
    topo = parse_topology(data["topology"])
    try:
        geometry = LaneGeometry(**_dataclass_kwargs(LaneGeometry, data.get("geometry") or {},
                                                    "geometry"))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"geometry: {exc}") from None
    share = parse_truck_share(data.get("truck_share", 0.0))
    demand = parse_demand(data.get("demand", "medium"), share)
    controller = data.get("controller", "back-pressure")
    if controller not in CONTROLLER_NAMES:
        raise ScenarioError(f"controller: unknown controller {controller!r}")
    try:
        rules = SignalTimingRules(**_dataclass_kwargs(SignalTimingRules, data.get("timing") or {},
                                                      "timing"))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"timing: {exc}") from None
    agent = data.get("agent") or {}
    _check_keys(agent, AGENT_KEYS, "agent")
    try:
        agent_config = AgentConfig(**_dataclass_kwargs(AgentConfig, agent.get("config") or {},
                                                       "agent.config"))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"agent.config: {exc}") from None
    reward = agent.get("reward")
    if reward is not None and reward not in ALL_REWARDS:
        raise ScenarioError(f"agent.reward: unknown reward {reward!r}")
    training = data.get("training") or {}
    _check_keys(training, TRAINING_KEYS, "training")
    seeds = data.get("seeds", [0])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)):
        raise ScenarioError("seeds: expected a non-empty list of integers")
    sc = Scenario(
        topology=topo, geometry=geometry, demand=demand, controller=controller, rules=rules,
        agent_config=agent_config, checkpoint=agent.get("checkpoint"), reward=reward,
        train_episodes=_positive_int(training.get("episodes", 50), "training.episodes"),
        train_horizon=_number(training.get("horizon", 1800.0), "training.horizon"),
        train_warmup=_number(training.get("warmup", 300.0), "training.warmup"),
        horizon=_number(data.get("horizon", 3600.0), "horizon"),
        warmup=_number(data.get("warmup", 300.0), "warmup"),
        dt=_number(data.get("dt", 1.0), "dt"),
        truck_headway_factor=_number(data.get("truck_headway_factor", 1.0),
                                     "truck_headway_factor"),
        seeds=tuple(seeds),
    )
    if not sc.horizon > sc.warmup >= 0:
        raise ScenarioError("horizon: must exceed warmup (warmup >= 0)")
    if not sc.train_horizon > sc.train_warmup >= 0:
        raise ScenarioError("training.horizon: must exceed training.warmup")
    if sc.dt <= 0:
        raise ScenarioError("dt: must be > 0")
    if sc.truck_headway_factor < 1:
        raise ScenarioError("truck_headway_factor: must be >= 1")
    return sc


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"scenario: not valid YAML ({exc})") from None
    return parse_scenario(data)
