"""
Static network topology and signal structure.

A network is a set of signalized intersections joined by directed links.
Every approach to an intersection is represented by two lane objects
("roles"): ``T`` carries through and right-turning traffic, ``L`` carries
left-turning traffic.  A lane object may stand for a group of physical
lanes; jam density and saturation flow scale with the group size.

Lane ids follow ``<node>.<side>.<role>`` where ``side`` is the side of
``node`` the traffic arrives from.  An internal lane is therefore the
incoming lane of its downstream node and an outgoing lane of its upstream
node.  Traffic leaving the network goes to an exit sentinel lane
``<node>.exit.<side>``; vehicles are removed as soon as they reach it.

Phase templates (per intersection, in this order):

    0  NS-through   T lanes from N and S
    1  NS-left      L lanes from N and S
    2  EW-through   T lanes from E and W
    3  EW-left      L lanes from E and W

Horizontal (E-W) roads are major, vertical roads are minor.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

SIDES = ("N", "E", "S", "W")
ROLES = ("T", "L")
OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}
# heading -> heading after a left / right turn (right-hand traffic)
LEFT_OF = {"E": "N", "N": "W", "W": "S", "S": "E"}
RIGHT_OF = {"E": "S", "S": "W", "W": "N", "N": "E"}
# grid offsets of the neighbour lying on each side
SIDE_OFFSET = {"N": (-1, 0), "S": (1, 0), "W": (0, -1), "E": (0, 1)}

PHASE_TEMPLATE = (
    ("NS-through", ("N", "S"), "T"),
    ("NS-left", ("N", "S"), "L"),
    ("EW-through", ("E", "W"), "T"),
    ("EW-left", ("E", "W"), "L"),
)


class ConfigurationError(ValueError):
    """Invalid topology or geometry parameters."""


class NotFoundError(KeyError):
    """Unknown lane, movement, phase or intersection id."""


@dataclass(frozen=True)
class Lane:
    id: str
    length: float  # m
    free_flow_speed: float  # m/s
    jam_density: float  # PCE/m
    saturation_flow: float  # PCE/s
    is_entry: bool = False
    is_exit: bool = False
    upstream: Optional[str] = None  # node the lane leaves (None at a boundary)
    downstream: Optional[str] = None  # node the lane feeds (None for exits)
    road: str = "major"
    role: str = "T"
    demand_share: float = 1.0  # fraction of the approach demand using this lane

    def __post_init__(self):
        for name in ("length", "free_flow_speed", "jam_density", "saturation_flow"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"lane {self.id}: {name} must be > 0")

    @property
    def capacity(self) -> float:
        """Storage in PCE.  Entry lanes hold the unbounded origin backlog."""
        if self.is_entry:
            return math.inf
        return self.jam_density * self.length

    @property
    def travel_time(self) -> float:
        return self.length / self.free_flow_speed


@dataclass(frozen=True)
class Movement:
    id: str
    intersection: str
    from_lane: str
    to_lane: str
    saturation_flow: float  # PCE/s, the movement's share of the lane discharge
    turn: str = "through"

    def __post_init__(self):
        if self.from_lane == self.to_lane:
            raise ConfigurationError(f"movement {self.id}: from_lane == to_lane")


@dataclass(frozen=True)
class Phase:
    id: str
    intersection: str
    movements: Tuple[str, ...]
    name: str = ""

    def __post_init__(self):
        if not self.movements:
            raise ConfigurationError(f"phase {self.id} has no movements")


@dataclass(frozen=True)
class Intersection:
    id: str
    lanes: Tuple[str, ...]
    movements: Tuple[str, ...]
    phases: Tuple[str, ...]
    fixed_sequence: bool = False
    position: Tuple[int, int] = (0, 0)
    # fixed observation layout: 8 incoming slots (side x role) and 8 outgoing
    # slots (side x role of the downstream link); None pads exit sides
    incoming: Tuple[Optional[str], ...] = ()
    outgoing: Tuple[Optional[str], ...] = ()

    def __post_init__(self):
        if len(self.phases) < 2:
            raise ConfigurationError(f"intersection {self.id} needs >= 2 phases")


@dataclass(frozen=True)
class LaneGeometry:
    """Default geometry; every field is overridable from a scenario file."""

    link_length: float = 300.0
    entry_length: float = 300.0
    free_flow_speed: float = 15.0
    jam_density: float = 0.15  # per physical lane
    saturation_flow: float = 0.5  # per physical lane
    major_through_lanes: int = 2
    minor_through_lanes: int = 2
    left_lanes: int = 1
    p_through: float = 0.8
    p_left: float = 0.1
    p_right: float = 0.1
    fixed_sequence: bool = False

    def __post_init__(self):
        for name in ("link_length", "entry_length", "free_flow_speed",
                     "jam_density", "saturation_flow"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"geometry.{name} must be > 0")
        for name in ("major_through_lanes", "minor_through_lanes", "left_lanes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"geometry.{name} must be >= 1")
        probs = (self.p_through, self.p_left, self.p_right)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigurationError("turning probabilities must be >= 0 and sum to 1")
        if self.p_through + self.p_right <= 0 or self.p_left <= 0:
            raise ConfigurationError("both lane roles need a positive demand share")


@dataclass
class Network:
    intersections: Dict[str, Intersection]
    lanes: Dict[str, Lane]
    movements: Dict[str, Movement]
    phases: Dict[str, Phase]
    turning_ratios: Dict[str, Dict[str, float]]
    geometry: Optional[LaneGeometry] = None
    _from_lane: Dict[str, List[str]] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        index: Dict[str, List[str]] = {lid: [] for lid in self.lanes}
        for mid, m in self.movements.items():
            index[m.from_lane].append(mid)
        self._from_lane = index
        self.validate()

    # -- lookups ---------------------------------------------------------
    def lane(self, lane_id: str) -> Lane:
        try:
            return self.lanes[lane_id]
        except KeyError:
            raise NotFoundError(f"unknown lane {lane_id!r}") from None

    def phase(self, phase_id: str) -> Phase:
        try:
            return self.phases[phase_id]
        except KeyError:
            raise NotFoundError(f"unknown phase {phase_id!r}") from None

    def movements_from(self, lane_id: str) -> List[Movement]:
        return [self.movements[mid] for mid in self._from_lane[lane_id]]

    def entry_lanes(self) -> List[Lane]:
        return [lane for lane in self.lanes.values() if lane.is_entry]

    def exit_lanes(self) -> List[Lane]:
        return [lane for lane in self.lanes.values() if lane.is_exit]

    def incoming_lanes(self, node: str) -> List[str]:
        return [lid for lid in self.intersections[node].incoming if lid is not None]

    def phase_lanes(self, phase_id: str) -> List[str]:
        """Incoming lanes served by a phase, in movement order, deduplicated."""
        seen: List[str] = []
        for mid in self.phase(phase_id).movements:
            lane = self.movements[mid].from_lane
            if lane not in seen:
                seen.append(lane)
        return seen

    # -- checks ----------------------------------------------------------
    def validate(self) -> None:
        for lid, lane in self.lanes.items():
            if lid != lane.id:
                raise ConfigurationError(f"lane key {lid!r} != id {lane.id!r}")
            if not lane.is_exit and not self._from_lane[lid]:
                raise ConfigurationError(f"lane {lid} has no outgoing movement")
            if lane.is_exit and self._from_lane[lid]:
                raise ConfigurationError(f"exit lane {lid} has outgoing movements")
        for mid, m in self.movements.items():
            a, b = self.lane(m.from_lane), self.lane(m.to_lane)
            if a.downstream != m.intersection or b.upstream != m.intersection:
                raise ConfigurationError(f"movement {mid} lanes do not attach to {m.intersection}")
        for lid, ratios in self.turning_ratios.items():
            if set(ratios) != set(self._from_lane[lid]):
                raise ConfigurationError(f"turning ratios of {lid} do not match its movements")
            if abs(sum(ratios.values()) - 1.0) > 1e-9:
                raise ConfigurationError(f"turning ratios of {lid} do not sum to 1")
        for node in self.intersections.values():
            covered = set()
            for pid in node.phases:
                ph = self.phase(pid)
                if ph.intersection != node.id:
                    raise ConfigurationError(f"phase {pid} belongs to another intersection")
                for mid in ph.movements:
                    if self.movements[mid].intersection != node.id:
                        raise ConfigurationError(f"phase {pid} holds foreign movement {mid}")
                covered.update(ph.movements)
            if covered != set(node.movements):
                raise ConfigurationError(f"intersection {node.id}: movement not in any phase")
        if not self._connected():
            raise ConfigurationError("network graph is not connected")

    def _connected(self) -> bool:
        nodes = list(self.intersections)
        if not nodes:
            return False
        adj: Dict[str, set] = {n: set() for n in nodes}
        for lane in self.lanes.values():
            if lane.upstream and lane.downstream:
                adj[lane.upstream].add(lane.downstream)
                adj[lane.downstream].add(lane.upstream)
        seen = {nodes[0]}
        stack = [nodes[0]]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return len(seen) == len(nodes)

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "geometry": asdict(self.geometry) if self.geometry else None,
            "intersections": {k: asdict(v) for k, v in sorted(self.intersections.items())},
            "lanes": {k: asdict(v) for k, v in sorted(self.lanes.items())},
            "movements": {k: asdict(v) for k, v in sorted(self.movements.items())},
            "phases": {k: asdict(v) for k, v in sorted(self.phases.items())},
            "turning_ratios": {k: dict(sorted(v.items()))
                               for k, v in sorted(self.turning_ratios.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "Network":
        def tuples(d, keys):
            return {k: (tuple(v) if k in keys and v is not None else v) for k, v in d.items()}

        inter = {k: Intersection(**tuples(v, ("lanes", "movements", "phases", "position",
                                              "incoming", "outgoing")))
                 for k, v in data["intersections"].items()}
        return cls(
            intersections=inter,
            lanes={k: Lane(**v) for k, v in data["lanes"].items()},
            movements={k: Movement(**v) for k, v in data["movements"].items()},
            phases={k: Phase(**tuples(v, ("movements",))) for k, v in data["phases"].items()},
            turning_ratios={k: dict(v) for k, v in data["turning_ratios"].items()},
            geometry=LaneGeometry(**data["geometry"]) if data.get("geometry") else None,
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def internal_links(self) -> int:
        """Number of undirected road segments joining two intersections."""
        pairs = {frozenset((lane.upstream, lane.downstream)) for lane in self.lanes.values()
                 if lane.upstream and lane.downstream}
        return len(pairs)


def phase_movements(network: Network, phase_id: str) -> List[Movement]:
    return [network.movements[mid] for mid in network.phase(phase_id).movements]


def node_id(r: int, c: int) -> str:
    return f"r{r}c{c}"


def build_arterial(n_intersections: int, geometry: Optional[LaneGeometry] = None) -> Network:
    """Linear corridor of ``n_intersections`` along a major E-W road."""
    if n_intersections < 1:
        raise ConfigurationError("an arterial needs at least one intersection")
    return build_grid(1, n_intersections, geometry)


def build_grid(rows: int, cols: int, geometry: Optional[LaneGeometry] = None) -> Network:
    if rows < 1 or cols < 1:
        raise ConfigurationError("grid dimensions must be >= 1")
    g = geometry or LaneGeometry()
    nodes = [(r, c) for r in range(rows) for c in range(cols)]

    def neighbour(r, c, side):
        dr, dc = SIDE_OFFSET[side]
        rr, cc = r + dr, c + dc
        return (rr, cc) if 0 <= rr < rows and 0 <= cc < cols else None

    share = {"T": g.p_through + g.p_right, "L": g.p_left}
    lanes: Dict[str, Lane] = {}

    # incoming lanes of every node (side the traffic comes from, role)
    for r, c in nodes:
        nid = node_id(r, c)
        for side in SIDES:
            road = "major" if side in ("E", "W") else "minor"
            through = g.major_through_lanes if road == "major" else g.minor_through_lanes
            up = neighbour(r, c, side)
            for role in ROLES:
                width = through if role == "T" else g.left_lanes
                lid = f"{nid}.{side}.{role}"
                lanes[lid] = Lane(
                    id=lid,
                    length=g.link_length if up else g.entry_length,
                    free_flow_speed=g.free_flow_speed,
                    jam_density=g.jam_density * width,
                    saturation_flow=g.saturation_flow * width,
                    is_entry=up is None,
                    upstream=node_id(*up) if up else None,
                    downstream=nid,
                    road=road,
                    role=role,
                    demand_share=share[role] if up is None else 1.0,
                )
    # exit sentinels on boundary sides
    for r, c in nodes:
        nid = node_id(r, c)
        for side in SIDES:
            if neighbour(r, c, side) is None:
                lid = f"{nid}.exit.{side}"
                lanes[lid] = Lane(
                    id=lid, length=g.link_length, free_flow_speed=g.free_flow_speed,
                    jam_density=g.jam_density, saturation_flow=g.saturation_flow,
                    is_exit=True, upstream=nid, downstream=None,
                    road="major" if side in ("E", "W") else "minor", role="X",
                )

    def targets(r, c, side):
        """Lanes reached by leaving node (r, c) on ``side``, with their shares."""
        nb = neighbour(r, c, side)
        if nb is None:
            return [(f"{node_id(r, c)}.exit.{side}", 1.0)]
        nid = node_id(*nb)
        back = OPPOSITE[side]
        return [(f"{nid}.{back}.T", share["T"]), (f"{nid}.{back}.L", share["L"])]

    movements: Dict[str, Movement] = {}
    ratios: Dict[str, Dict[str, float]] = {}
    intersections: Dict[str, Intersection] = {}
    phases: Dict[str, Phase] = {}
    for r, c in nodes:
        nid = node_id(r, c)
        node_movs: List[str] = []
        lane_movs: Dict[str, List[str]] = {}
        for side in SIDES:
            heading = OPPOSITE[side]
            for role in ROLES:
                lid = f"{nid}.{side}.{role}"
                lane = lanes[lid]
                if role == "T":
                    turns = [("through", heading, g.p_through / share["T"]),
                             ("right", RIGHT_OF[heading], g.p_right / share["T"])]
                else:
                    turns = [("left", LEFT_OF[heading], 1.0)]
                lane_movs[lid] = []
                ratios[lid] = {}
                for turn, out_side, p_turn in turns:
                    if p_turn <= 0:
                        continue
                    for to_lane, p_next in targets(r, c, out_side):
                        mid = f"{lid}>{to_lane}"
                        p = p_turn * p_next
                        movements[mid] = Movement(
                            id=mid, intersection=nid, from_lane=lid, to_lane=to_lane,
                            saturation_flow=lane.saturation_flow * p, turn=turn,
                        )
                        ratios[lid][mid] = p
                        lane_movs[lid].append(mid)
                        node_movs.append(mid)
        phase_ids = []
        for k, (name, sides, role) in enumerate(PHASE_TEMPLATE):
            pid = f"{nid}.p{k}"
            movs = tuple(m for s in sides for m in lane_movs[f"{nid}.{s}.{role}"])
            phases[pid] = Phase(id=pid, intersection=nid, movements=movs, name=name)
            phase_ids.append(pid)
        incoming = tuple(f"{nid}.{s}.{role}" for s in SIDES for role in ROLES)
        outgoing: List[Optional[str]] = []
        for s in SIDES:
            outs = [t for t, _ in targets(r, c, s)]
            outgoing.extend(outs + [None] * (2 - len(outs)))
        node_lanes = tuple(incoming) + tuple(x for x in outgoing if x is not None)
        intersections[nid] = Intersection(
            id=nid, lanes=node_lanes, movements=tuple(node_movs), phases=tuple(phase_ids),
            fixed_sequence=g.fixed_sequence, position=(r, c),
            incoming=incoming, outgoing=tuple(outgoing),
        )
    return Network(intersections=intersections, lanes=lanes, movements=movements,
                   phases=phases, turning_ratios=ratios, geometry=g)


@dataclass
class NetworkState:
    """Queue vector of the network: per-lane backlog in PCE plus the PCE
    still travelling the free-flow part of each lane."""

    queue: Dict[str, float]
    moving_count: Dict[str, float]
    time: float = 0.0

    @classmethod
    def empty(cls, network: Network) -> "NetworkState":
        return cls(queue={lid: 0.0 for lid in network.lanes},
                   moving_count={lid: 0.0 for lid in network.lanes})

    def copy(self) -> "NetworkState":
        return NetworkState(dict(self.queue), dict(self.moving_count), self.time)

    def density(self, lane: Lane) -> float:
        """PCE per metre on ``lane`` (queued plus moving)."""
        if lane.is_exit:
            return 0.0
        return (self.queue[lane.id] + self.moving_count[lane.id]) / lane.length

    def spare(self, lane: Lane) -> float:
        if lane.is_exit or lane.is_entry:
            return math.inf
        return lane.capacity - self.queue[lane.id] - self.moving_count[lane.id]
