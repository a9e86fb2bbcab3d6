"""
Command-line benchmark harness.

    lyapsig simulate SCENARIO [--seed N] [--out steps.csv]
    lyapsig train SCENARIO [--episodes N] --checkpoint agent.json [--log train.csv]
    lyapsig matrix [--topologies ...] [--demands ...] [--truck-shares ...]
                   [--controllers ...] [--seeds K] --out PREFIX
    lyapsig stability SCENARIO [--seed N]

Set LYAPSIG_LOG (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from typing import List, Optional, Sequence

from ..controllers import BASELINE_CONTROLLERS, CONTROLLER_NAMES, Controller, make_controller
from ..flow_model import DemandSpec
from ..lyapunov import StabilityEstimate
from ..net_model import Network
from ..rl_agent import (REWARD_KINDS, RLController, TrainLog, load_checkpoint, make_agents,
                        save_checkpoint, train_agents)
from ..sim_engine import EpisodeConfig, MetricsReport, run_episode, write_metrics_csv
from .results import ResultTable
from .scenario import (TRUCK_SHARES, Scenario, ScenarioError, Topology, load_scenario,
                       parse_topology)

log = logging.getLogger("lyapsig")

STEP_CSV_HELP = ("per-step CSV columns: time, L_linear, L_quadratic, delta, total_queue, "
                 "reward (RL only), phase:<intersection>, q:<lane> (PCE)")
MATRIX_CSV_HELP = ("matrix CSV columns: controller, topology, demand, truck_share, n, mean, std, "
                   "delays (';'-separated per-seed average delays in seconds)")


def build_controller(sc: Scenario, network: Network) -> Controller:
    if not sc.is_rl:
        return make_controller(sc.controller)
    if not sc.checkpoint:
        raise ScenarioError("agent.checkpoint: required to run an rl controller")
    agents, reward = load_checkpoint(sc.checkpoint, network)
    return RLController(agents, reward, training=False, name=sc.controller)


def episode_config(sc: Scenario, network: Network, seed: int, controller: Controller,
                   record_rows: bool = False) -> EpisodeConfig:
    return EpisodeConfig(network=network, demand=sc.demand, controller=controller,
                         horizon=sc.horizon, dt=sc.dt, seed=seed, warmup=sc.warmup,
                         rules=sc.rules, truck_headway_factor=sc.truck_headway_factor,
                         record_rows=record_rows)


def _print_summary(report: MetricsReport) -> None:
    for key, value in report.summary().items():
        print(f"{key}: {value}")


def cmd_simulate(args) -> MetricsReport:
    sc = load_scenario(args.scenario)
    net = sc.network()
    seed = args.seed if args.seed is not None else sc.seeds[0]
    report = run_episode(episode_config(sc, net, seed, build_controller(sc, net),
                                        record_rows=bool(args.out)))
    if args.out:
        write_metrics_csv(args.out, report)
    print(f"controller: {sc.controller}  seed: {seed}")
    _print_summary(report)
    return report


def run_training(sc: Scenario, episodes: int, seed: int):
    """Train agents for ``sc``; returns (agents, reward kind, log, network)."""
    if not sc.is_rl:
        raise ScenarioError("controller: training needs an rl-* controller")
    reward = sc.reward or REWARD_KINDS[sc.controller]
    net = sc.network()
    agents = make_agents(net, replace(sc.agent_config, seed=seed))
    ctrl = RLController(agents, reward, training=True, name=sc.controller)

    def make_episode(k: int) -> EpisodeConfig:
        return EpisodeConfig(network=net, demand=sc.demand, controller=ctrl,
                             horizon=sc.train_horizon, dt=sc.dt, seed=seed * 100_003 + k,
                             warmup=sc.train_warmup, rules=sc.rules,
                             truck_headway_factor=sc.truck_headway_factor)

    train_log = train_agents(make_episode, ctrl, episodes, log_every=10)
    return agents, reward, train_log, net


def write_train_log(path, train_log: TrainLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "mean_reward", "mean_loss", "avg_delay", "epsilon"])
        for k, row in enumerate(zip(train_log.episode_rewards, train_log.episode_losses,
                                    train_log.episode_delays, train_log.epsilons)):
            w.writerow([k] + [repr(float(x)) for x in row])


def cmd_train(args) -> TrainLog:
    sc = load_scenario(args.scenario)
    seed = args.seed if args.seed is not None else sc.seeds[0]
    episodes = args.episodes or sc.train_episodes
    agents, reward, train_log, net = run_training(sc, episodes, seed)
    save_checkpoint(args.checkpoint, agents, net, reward)
    log_path = args.log or f"{args.checkpoint}.log.csv"
    write_train_log(log_path, train_log)
    print(f"trained {episodes} episodes ({reward} reward); checkpoint {args.checkpoint}; "
          f"log {log_path}")
    for k, (r, d) in enumerate(zip(train_log.episode_rewards, train_log.episode_delays)):
        print(f"episode {k}: mean reward {r:.4f}  avg delay {d:.2f}")
    return train_log


def _run_cell(topology: str, demand: str, share: float, controller: str, seed: int,
              horizon: float, warmup: float, checkpoint_dir: Optional[str]) -> float:
    topo = parse_topology(topology)
    net = topo.build()
    if controller in BASELINE_CONTROLLERS:
        ctrl = make_controller(controller)
    else:
        if not checkpoint_dir:
            raise ScenarioError(f"controllers: {controller} needs --checkpoint-dir")
        path = os.path.join(checkpoint_dir, f"{controller}_{topology}.json")
        agents, reward = load_checkpoint(path, net)
        ctrl = RLController(agents, reward, training=False, name=controller)
    cfg = EpisodeConfig(network=net, demand=DemandSpec.from_level(demand, share),
                        controller=ctrl, horizon=horizon, warmup=warmup, seed=seed)
    return run_episode(cfg).avg_vehicle_delay


def run_matrix(topologies: Sequence[str], demands: Sequence[str], shares: Sequence[float],
               controllers: Sequence[str], seeds: Sequence[int], horizon: float = 3600.0,
               warmup: float = 300.0, checkpoint_dir: Optional[str] = None,
               jobs: int = 1) -> ResultTable:
    for c in controllers:
        if c not in CONTROLLER_NAMES:
            raise ScenarioError(f"controllers: unknown controller {c!r}")
    for t in topologies:
        parse_topology(t)
    for s in shares:
        if not any(abs(s - a) < 1e-12 for a in TRUCK_SHARES):
            raise ScenarioError(f"truck-shares: must be one of {TRUCK_SHARES}")
    tasks = [(t, d, float(s), c, seed, horizon, warmup, checkpoint_dir)
             for s in shares for c in controllers for d in demands for t in topologies
             for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, *zip(*tasks)))
    else:
        results = [_run_cell(*task) for task in tasks]
    grouped = {}
    for task, delay in zip(tasks, results):
        grouped.setdefault(task[:4], []).append(delay)
    table = ResultTable()
    for (t, d, s, c), delays in grouped.items():
        table.add(c, t, d, s, delays)
    return table


def cmd_matrix(args) -> ResultTable:
    seeds = [args.seed + k for k in range(args.seeds)]
    table = run_matrix(args.topologies, args.demands, args.truck_shares, args.controllers,
                       seeds, args.horizon, args.warmup, args.checkpoint_dir, args.jobs)
    with open(f"{args.out}.csv", "w", newline="") as fh:
        fh.write(table.to_csv())
    text = table.to_text()
    with open(f"{args.out}.txt", "w") as fh:
        fh.write(text)
    print(text, end="")
    return table


def cmd_stability(args) -> StabilityEstimate:
    sc = load_scenario(args.scenario)
    net = sc.network()
    seed = args.seed if args.seed is not None else sc.seeds[0]
    report = run_episode(episode_config(sc, net, seed, build_controller(sc, net)))
    est = report.stability
    print(f"B: {est.B}")
    print(f"epsilon: {est.epsilon}")
    print(f"B/epsilon: {est.avg_queue_bound}")
    print(f"measured time-average total queue: {est.measured_time_avg_queue}")
    print(f"bound held: {est.bound_holds}")
    print(f"strongly stable (epsilon > 0): {est.strongly_stable}")
    print(f"queue growing over final third: {est.growing}")
    print(f"degenerate: {est.degenerate}")
    return est


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lyapsig", description=__doc__.strip().splitlines()[0],
                                epilog=f"{STEP_CSV_HELP}. {MATRIX_CSV_HELP}.")
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides the file)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one episode", epilog=STEP_CSV_HELP)
    s.add_argument("scenario")
    s.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    s.add_argument("--out", help="per-step CSV path")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a DDQN controller")
    t.add_argument("scenario")
    t.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    t.add_argument("--episodes", type=int, default=None)
    t.add_argument("--checkpoint", required=True, help="output checkpoint (JSON)")
    t.add_argument("--log", help="training log CSV (default: CHECKPOINT.log.csv)")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("matrix", help="controller x demand x topology experiment",
                       epilog=MATRIX_CSV_HELP)
    m.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    m.add_argument("--topologies", nargs="+", default=["arterial-4", "grid-3x3"])
    m.add_argument("--demands", nargs="+", default=["low", "medium", "high"])
    m.add_argument("--truck-shares", nargs="+", type=float, default=[0.0])
    m.add_argument("--controllers", nargs="+", default=list(BASELINE_CONTROLLERS))
    m.add_argument("--seeds", type=int, default=5, help="seeds per cell")
    m.add_argument("--horizon", type=float, default=3600.0)
    m.add_argument("--warmup", type=float, default=300.0)
    m.add_argument("--checkpoint-dir", help="holds <controller>_<topology>.json for rl-*")
    m.add_argument("--jobs", type=int, default=1)
    m.add_argument("--out", required=True, help="output prefix for .csv and .txt")
    m.set_defaults(func=cmd_matrix)

    st = sub.add_parser("stability", help="estimate the drift-bound constants of a run")
    st.add_argument("scenario")
    st.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    st.set_defaults(func=cmd_stability)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("LYAPSIG_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "matrix" and args.seed is None:
        args.seed = 0
    try:
        args.func(args)
    except (ScenarioError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
