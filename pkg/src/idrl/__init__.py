"""Off-policy adversarial imitation from delayed demonstrations."""

from .config import Config, ConfigError, load_config
from .data import ExpertDataset, ReplayBuffer, augment_expert, load_expert, save_expert
from .delay import AugmentedState, DelayedEnv, belief_exact, belief_mc, build_augmented
from .discriminator import Discriminator, Pairs
from .envs import TabularMDP, lipschitz_constants, make_env
from .policy_opt import AuxDelayAgent, td_target
from .training import Trainer, train_bc, train_expert, train_idrl

__all__ = [
    "AugmentedState", "AuxDelayAgent", "Config", "ConfigError", "DelayedEnv", "Discriminator",
    "ExpertDataset", "Pairs", "ReplayBuffer", "TabularMDP", "Trainer", "augment_expert", "belief_exact",
    "belief_mc", "build_augmented", "lipschitz_constants", "load_config", "load_expert", "make_env",
    "save_expert", "td_target", "train_bc", "train_expert", "train_idrl",
]
