"""PPO-based joint power control and IRS phase-shift design for D2D networks."""

from .baselines import SchemeId, make_agent, train_and_evaluate, train_scheme
from .channel import PathLossParams, PhaseShiftVector, Position3
from .env import Action, IrsD2DEnv, NetworkConfig
from .ppo import PpoHyperparams, evaluate, train

__all__ = [
    "Action",
    "IrsD2DEnv",
    "NetworkConfig",
    "PathLossParams",
    "PhaseShiftVector",
    "Position3",
    "PpoHyperparams",
    "SchemeId",
    "evaluate",
    "make_agent",
    "train",
    "train_and_evaluate",
    "train_scheme",
]
