from .losses import approx_kl, clipped_surrogate, combined_loss, pg_surrogate, probability_ratio
from .policy import PolicyNet, policy_forward
from .rollout import RolloutBuffer, collect_rollout, compute_gae
from .trainer import PpoConfig, TwoStateBanditEnv, bandit_check, evaluate_agent, train_agent

__all__ = [
    "PolicyNet", "PpoConfig", "RolloutBuffer", "TwoStateBanditEnv", "approx_kl", "bandit_check",
    "clipped_surrogate", "collect_rollout", "combined_loss", "compute_gae", "evaluate_agent",
    "pg_surrogate", "policy_forward", "probability_ratio", "train_agent",
]
