"""Deep Q-learning signal control: features, rewards, Q-network and Double DQN."""

from .agent import (ALL_REWARDS, REWARD_KINDS, Agent, AgentConfig, RLController, TrainLog,
                    ddqn_targets, ddqn_update, load_checkpoint, make_agents, save_checkpoint,
                    select_action, sync_target, train_agents)
from .features import (counterfactual_flows, encode_state, obs_length, observation_layout,
                       phase_pressures, reward_flow, reward_pressure, reward_queue,
                       reward_waiting_time)
from .qnet import (Adam, QNetwork, TrainingFault, backprop_gradient, batch_gradient,
                   clip_by_global_norm)
from .replay import Experience, ReplayBuffer
