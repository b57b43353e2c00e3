"""Reconstruction-free Dreamer world model trained by continuous deterministic prediction."""

from .config import Config, ConfigError, desk_config, load_config, longrun_config
from .envs import AchievementTable, MiniGather, crafter_score
from .objectives import LossBreakdown, LossWeights, cdp_loss, kl_balanced, total_loss
from .worldmodel import WorldModel

__all__ = [
    "AchievementTable",
    "Config",
    "ConfigError",
    "LossBreakdown",
    "LossWeights",
    "MiniGather",
    "WorldModel",
    "cdp_loss",
    "crafter_score",
    "desk_config",
    "kl_balanced",
    "load_config",
    "longrun_config",
    "total_loss",
]
