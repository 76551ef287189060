"""PPO with atomic actions for periodic multi-class overflow routing."""
from .config import SystemConfig, validate_config
from .dynamics import ExogenousDraw, InfeasibleAction, State, apply_action, cost, feasibility_mask
from .network import ClipSchedule, NetworkParams, OptimizerState, init_params
from .policy import PolicySpec, action_log_prob, benchmark, network, prob_ratio, sample_action
from .presets import PRESET_NAMES, load_preset
from .rollout import Evaluation, Trajectory, evaluate, rollout
from .trainer import TrainConfig, TrainResult, train

__all__ = [
    "SystemConfig", "validate_config",
    "State", "ExogenousDraw", "InfeasibleAction", "apply_action", "cost", "feasibility_mask",
    "NetworkParams", "OptimizerState", "ClipSchedule", "init_params",
    "PolicySpec", "benchmark", "network", "sample_action", "action_log_prob", "prob_ratio",
    "PRESET_NAMES", "load_preset",
    "Trajectory", "Evaluation", "rollout", "evaluate",
    "TrainConfig", "TrainResult", "train",
]
