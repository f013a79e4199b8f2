"""Self-attention actor-critic networks trained with PPO, on a numpy autodiff core."""

__version__ = "0.1.0"

from .networks import NetworkVariant, PolicyValueNet, build_network, extract_attention, net_forward
from .ppo import PPOConfig, evaluate_policy, train

__all__ = [
    "__version__",
    "NetworkVariant",
    "PolicyValueNet",
    "PPOConfig",
    "build_network",
    "evaluate_policy",
    "extract_attention",
    "net_forward",
    "train",
]
