"""Queue-network traffic simulator with Lyapunov-drift and deep-RL signal controllers."""

from .net_model import (ConfigurationError, LaneGeometry, Network, NetworkState, NotFoundError,
                        build_arterial, build_grid, phase_movements)
from .flow_model import DemandSpec, VehicleKind, greenshields_flow, queue_update
from .controllers import SignalTimingRules, make_controller
from .sim_engine import EpisodeConfig, MetricsReport, Simulation, run_episode

__version__ = "0.1.0"
