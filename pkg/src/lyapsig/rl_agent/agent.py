"""
Double DQN agent, the RL signal controller and the training loop.

One agent serves every intersection of the same template by default
(shared parameters, one replay buffer); ``AgentConfig.shared = False``
gives each intersection its own agent.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..controllers import Controller
from ..net_model import Intersection, Network
from .features import (counterfactual_flows, encode_state, obs_length, phase_pressures,
                       reward_flow, reward_pressure, reward_queue, reward_waiting_time)
from .qnet import Adam, QNetwork, TrainingFault, batch_gradient, clip_by_global_norm
from .replay import Experience, ReplayBuffer

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lyapsig-agent"
CHECKPOINT_VERSION = 1

# controller name -> reward kind
REWARD_KINDS = {
    "rl-wt": "waiting",
    "rl-q": "queue",
    "rl-mp": "pressure-saturation",
    "rl-bp": "pressure",
}
ALL_REWARDS = ("waiting", "queue", "pressure-saturation", "pressure", "flow")


@dataclass
class AgentConfig:
    hidden: Tuple[int, ...] = (64, 64)
    gamma: float = 0.95
    learning_rate: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 20_000
    replay_capacity: int = 50_000
    batch_size: int = 64
    target_sync: int = 500  # updates between target copies
    learn_start: int = 64  # experiences before the first update
    grad_clip: float = 10.0
    obs_scale: float = 0.1
    reward_scale: float = 0.1
    shared: bool = True
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.target_sync < 1:
            raise ValueError("learning_rate, batch_size and target_sync must be positive")
        if self.replay_capacity < 1 or self.eps_decay_steps < 0:
            raise ValueError("replay_capacity must be >= 1 and eps_decay_steps >= 0")


def select_action(net: QNetwork, obs: np.ndarray, epsilon: float, rng: np.random.Generator,
                  allowed: Optional[Sequence[int]] = None) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    choices = list(range(net.n_actions)) if allowed is None else list(allowed)
    if not choices:
        raise ValueError("no allowed action")
    if rng.random() < epsilon:
        return choices[int(rng.integers(len(choices)))]
    q = net.forward(obs)
    return max(choices, key=lambda a: (q[a], -a))


def ddqn_targets(online: QNetwork, target: QNetwork, r: np.ndarray, s_next: np.ndarray,
                 terminal: np.ndarray, gamma: float) -> np.ndarray:
    best = np.argmax(online.forward(s_next), axis=1)
    boot = target.forward(s_next)[np.arange(len(best)), best]
    return r + gamma * np.where(terminal, 0.0, boot)


def ddqn_update(online: QNetwork, target: QNetwork,
                batch: Union[Sequence[Experience], Tuple[np.ndarray, ...]],
                config: AgentConfig, optimizer: Optional[Adam] = None) -> float:
    """One gradient step on the Double DQN squared error; returns the pre-step loss.

    The loss is mean (Q(s, a) - y)^2 with y from :func:`ddqn_targets`.
    Without ``optimizer`` a plain gradient step of size learning_rate is taken.
    """
    if isinstance(batch, tuple):
        s, a, r, s_next, term = batch
    else:
        if not batch:
            raise ValueError("empty batch")
        s = np.stack([e.s for e in batch])
        a = np.array([e.a for e in batch])
        r = np.array([e.r for e in batch], dtype=float)
        s_next = np.stack([e.s_next for e in batch])
        term = np.array([e.terminal for e in batch])
    if len(a) == 0:
        raise ValueError("empty batch")
    y = ddqn_targets(online, target, r, s_next, term, config.gamma)
    q = online.forward(s)[np.arange(len(a)), a]
    loss = float(np.mean((q - y) ** 2))
    grads = clip_by_global_norm(batch_gradient(online, s, a, y), config.grad_clip)
    if optimizer is None:
        for p, g in zip(online.params(), grads):
            p -= config.learning_rate * g
    else:
        optimizer.step(grads)
    if not online.is_finite():
        raise TrainingFault("non-finite parameters after update")
    return loss


def sync_target(online: QNetwork, target: QNetwork, updates: int, period: int) -> bool:
    """Copy online into target when ``updates`` reaches a multiple of ``period``."""
    if updates > 0 and updates % period == 0:
        target.load_from(online)
        return True
    return False


class Agent:
    def __init__(self, obs_dim: int, n_actions: int, config: AgentConfig = AgentConfig(),
                 online: Optional[QNetwork] = None):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.online = online or QNetwork((obs_dim, *config.hidden, n_actions), self.rng)
        if self.online.widths[0] != obs_dim or self.online.n_actions != n_actions:
            raise ValueError("network widths do not match the observation/action sizes")
        self.target = self.online.copy()
        self.optimizer = Adam(self.online.params(), config.learning_rate)
        self.buffer = ReplayBuffer(config.replay_capacity, obs_dim)
        self.steps = 0
        self.updates = 0
        self.losses: List[float] = []

    @property
    def obs_dim(self) -> int:
        return self.online.widths[0]

    def epsilon(self) -> float:
        c = self.config
        if c.eps_decay_steps == 0:
            return c.eps_end
        frac = min(self.steps / c.eps_decay_steps, 1.0)
        return c.eps_start + frac * (c.eps_end - c.eps_start)

    def act(self, obs: np.ndarray, allowed: Optional[Sequence[int]] = None,
            greedy: bool = False) -> int:
        if len(obs) != self.obs_dim:
            raise ValueError(f"observation length {len(obs)} != {self.obs_dim}")
        if greedy:
            return select_action(self.online, obs, 0.0, self.rng, allowed)
        a = select_action(self.online, obs, self.epsilon(), self.rng, allowed)
        self.steps += 1
        return a

    def observe(self, exp: Experience) -> Optional[float]:
        self.buffer.push(exp)
        c = self.config
        if len(self.buffer) < max(c.batch_size, c.learn_start):
            return None
        batch = self.buffer.sample(c.batch_size, self.rng)
        loss = ddqn_update(self.online, self.target, batch, c, self.optimizer)
        self.updates += 1
        sync_target(self.online, self.target, self.updates, c.target_sync)
        self.losses.append(loss)
        return loss


def make_agents(network: Network, config: AgentConfig = AgentConfig()) -> Dict[str, Agent]:
    """Agent per intersection id; same-template intersections share one when configured."""
    agents: Dict[str, Agent] = {}
    by_template: Dict[Tuple[int, int], Agent] = {}
    for nid in sorted(network.intersections):
        node = network.intersections[nid]
        key = (obs_length(node), len(node.phases))
        if config.shared and key in by_template:
            agents[nid] = by_template[key]
            continue
        cfg = config if config.shared else _reseeded(config, len(agents))
        agent = Agent(key[0], key[1], cfg)
        by_template[key] = agent
        agents[nid] = agent
    return agents


def _reseeded(config: AgentConfig, k: int) -> AgentConfig:
    d = asdict(config)
    d["seed"] = config.seed + 1000 * k
    return AgentConfig(**d)


class RLController(Controller):
    """Signal controller backed by DDQN agents.

    The reward for a decision is measured at the same intersection's next
    decision, then the transition is stored (training mode only).
    """

    def __init__(self, agents: Dict[str, Agent], reward: str = "pressure",
                 training: bool = False, name: Optional[str] = None):
        if reward not in ALL_REWARDS:
            raise ValueError(f"unknown reward {reward!r}")
        self.agents = agents
        self.reward = reward
        self.training = training
        self.name = name or next((k for k, v in REWARD_KINDS.items() if v == reward), "rl")
        self.pending: Dict[str, Tuple[np.ndarray, int]] = {}
        self.wait_mark: Dict[str, float] = {}
        self.episode_rewards: List[float] = []

    def _agent(self, nid: str) -> Agent:
        try:
            return self.agents[nid]
        except KeyError:
            raise ValueError(f"no agent for intersection {nid}") from None

    def reset(self, sim) -> None:
        for nid, node in sim.network.intersections.items():
            if self._agent(nid).obs_dim != obs_length(node):
                raise ValueError(f"agent observation length does not fit intersection {nid}")
        self.pending = {}
        self.wait_mark = {nid: 0.0 for nid in sim.network.intersections}
        self.episode_rewards = []

    def observation(self, sim, node: Intersection) -> np.ndarray:
        agent = self._agent(node.id)
        return encode_state(node, sim, sim.signals[node.id].active_phase, agent.config.obs_scale)

    def measure_reward(self, sim, node: Intersection) -> float:
        net, st = sim.network, sim.state
        if self.reward == "waiting":
            return reward_waiting_time(sim.stopped_seconds[node.id] - self.wait_mark[node.id])
        if self.reward == "queue":
            return reward_queue(st.queue[l] for l in net.incoming_lanes(node.id))
        if self.reward == "pressure":
            return reward_pressure(phase_pressures(net, node, st, "greenshields"))
        if self.reward == "pressure-saturation":
            return reward_pressure(phase_pressures(net, node, st, "saturation"))
        rates = {l: v / sim.dt for l, v in sim.last_joined.items()}
        return reward_flow(counterfactual_flows(net, node, st, rates, sim.dt))

    def _close(self, sim, node: Intersection, obs: np.ndarray) -> None:
        s, a = self.pending.pop(node.id)
        r = self.measure_reward(sim, node)
        self.episode_rewards.append(r)
        sim.step_reward = (sim.step_reward or 0.0) + r
        if self.training:
            agent = self._agent(node.id)
            agent.observe(Experience(s, a, r * agent.config.reward_scale, obs, False))

    def decide(self, sim, node: Intersection, exclude=()) -> str:
        obs = self.observation(sim, node)
        if node.id in self.pending:
            self._close(sim, node, obs)
        excluded = set(exclude)
        allowed = [i for i, p in enumerate(node.phases) if p not in excluded]
        a = self._agent(node.id).act(obs, allowed, greedy=not self.training)
        self.pending[node.id] = (obs, a)
        self.wait_mark[node.id] = sim.stopped_seconds[node.id]
        return node.phases[a]

    def end_episode(self, sim) -> None:
        for nid in sorted(self.pending):
            node = sim.network.intersections[nid]
            self._close(sim, node, self.observation(sim, node))


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, agents: Dict[str, Agent], network: Network, reward: str) -> None:
    unique: Dict[int, str] = {}
    nets = {}
    owner = {}
    for nid in sorted(agents):
        key = id(agents[nid])
        if key not in unique:
            unique[key] = nid
            nets[nid] = agents[nid].online.to_dict()
        owner[nid] = unique[key]
    first = agents[sorted(agents)[0]]
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fingerprint": network.fingerprint(),
        "reward": reward,
        "config": asdict(first.config),
        "owner": owner,
        "networks": nets,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, network: Network) -> Tuple[Dict[str, Agent], str]:
    """Agents and reward kind; refuses a checkpoint made for another topology."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a supported agent checkpoint")
    if doc["fingerprint"] != network.fingerprint():
        raise ValueError("checkpoint was trained on a different network")
    cfg = doc["config"]
    cfg["hidden"] = tuple(cfg["hidden"])
    config = AgentConfig(**cfg)
    built: Dict[str, Agent] = {}
    agents = {}
    for nid, own in doc["owner"].items():
        if own not in built:
            net = QNetwork.from_dict(doc["networks"][own])
            built[own] = Agent(net.widths[0], net.n_actions, config, online=net)
        agents[nid] = built[own]
    return agents, doc["reward"]


# -- training -------------------------------------------------------------------

@dataclass
class TrainLog:
    episode_rewards: List[float] = field(default_factory=list)  # mean reward per decision
    episode_losses: List[float] = field(default_factory=list)  # mean loss (nan before learning)
    episode_delays: List[float] = field(default_factory=list)
    epsilons: List[float] = field(default_factory=list)


def train_agents(make_episode: Callable[[int], "EpisodeConfig"], controller: RLController,
                 episodes: int, log_every: int = 0) -> TrainLog:
    """Run ``episodes`` training episodes; ``make_episode(k)`` builds the k-th config."""
    from ..sim_engine import Simulation

    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    controller.training = True
    out = TrainLog()
    agents = {id(a): a for a in controller.agents.values()}.values()
    for ep in range(episodes):
        n_losses = {id(a): len(a.losses) for a in agents}
        sim = Simulation(make_episode(ep), controller)
        report = sim.run()
        controller.end_episode(sim)
        rewards = controller.episode_rewards
        losses = [l for a in agents for l in a.losses[n_losses[id(a)]:]]
        out.episode_rewards.append(float(np.mean(rewards)) if rewards else 0.0)
        out.episode_losses.append(float(np.mean(losses)) if losses else float("nan"))
        out.episode_delays.append(report.avg_vehicle_delay)
        out.epsilons.append(next(iter(agents)).epsilon())
        if log_every and (ep + 1) % log_every == 0:
            log.info("episode %d reward %.3f loss %.4f delay %.1f", ep + 1,
                     out.episode_rewards[-1], out.episode_losses[-1], out.episode_delays[-1])
    controller.training = False
    return out
