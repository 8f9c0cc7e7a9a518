"""The proposed joint scheme and the three comparison schemes.

Every scheme is PPO over a different slice of the action:

* PROPOSED     powers and phases (N + K dims)
* MPT          phases only, every transmitter at ``p_max`` (K dims)
* RPS          powers only, phases uniform at random every step (N dims)
* WITHOUT_IRS  powers only, the IRS removed (K forced to 0, N dims)
"""

from __future__ import annotations

import enum

import numpy as np

from .env import TWO_PI, Action, NetworkConfig
from .ppo import JointAction, PpoAgent, PpoHyperparams, TrainResult, evaluate, train


class SchemeId(str, enum.Enum):
    PROPOSED = "PROPOSED"
    MPT = "MPT"
    RPS = "RPS"
    WITHOUT_IRS = "WITHOUT_IRS"

    @classmethod
    def parse(cls, name: str) -> "SchemeId":
        key = name.strip().upper().replace("-", "_")
        aliases = {"NOIRS": "WITHOUT_IRS", "WITHOUTIRS": "WITHOUT_IRS", "PPO": "PROPOSED"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown scheme {name!r}; expected one of {[s.value for s in cls]}") from None


class MaxPowerAction:
    def __init__(self, config: NetworkConfig):
        self.config = config
        self.low = np.zeros(config.n_elements)
        self.high = np.full(config.n_elements, TWO_PI)
        self.log_scale = np.zeros(config.n_elements, dtype=bool)

    def env_config(self) -> NetworkConfig:
        return self.config

    def reset(self, rng):
        pass

    def to_action(self, a, rng) -> Action:
        return Action(powers=np.full(self.config.n_pairs, self.config.p_max), thetas=a)


class RandomPhaseAction:
    """Powers from the agent; phases drawn uniformly each step (or once per
    episode with ``per_episode=True``)."""

    def __init__(self, config: NetworkConfig, per_episode: bool = False):
        self.config = config
        self.per_episode = per_episode
        self.low = np.full(config.n_pairs, config.p_floor)
        self.high = np.full(config.n_pairs, config.p_max)
        self.log_scale = np.ones(config.n_pairs, dtype=bool)
        self._episode_thetas = None

    def env_config(self) -> NetworkConfig:
        return self.config

    def reset(self, rng):
        self._episode_thetas = rng.uniform(0.0, TWO_PI, size=self.config.n_elements) if self.per_episode else None

    def to_action(self, a, rng) -> Action:
        if self._episode_thetas is not None:
            thetas = self._episode_thetas
        else:
            thetas = rng.uniform(0.0, TWO_PI, size=self.config.n_elements)
        return Action(powers=a, thetas=thetas)


class NoIrsAction:
    def __init__(self, config: NetworkConfig):
        self.config = config.replace(n_elements=0)
        self.low = np.full(config.n_pairs, config.p_floor)
        self.high = np.full(config.n_pairs, config.p_max)
        self.log_scale = np.ones(config.n_pairs, dtype=bool)

    def env_config(self) -> NetworkConfig:
        return self.config

    def reset(self, rng):
        pass

    def to_action(self, a, rng) -> Action:
        return Action(powers=a, thetas=np.zeros(0))


def make_adapter(scheme: SchemeId | str, config: NetworkConfig, rps_per_episode: bool = False):
    scheme = SchemeId.parse(scheme) if isinstance(scheme, str) else scheme
    if scheme is SchemeId.PROPOSED:
        return JointAction(config)
    if scheme is SchemeId.MPT:
        return MaxPowerAction(config)
    if scheme is SchemeId.RPS:
        return RandomPhaseAction(config, per_episode=rps_per_episode)
    return NoIrsAction(config)


def make_agent(scheme: SchemeId | str, config: NetworkConfig, hyper: PpoHyperparams, seed=None):
    """Fresh (untrained) agent and its action adapter for ``scheme``."""
    adapter = make_adapter(scheme, config)
    obs_size = 2 * config.n_pairs**2
    log_scale = adapter.log_scale if hyper.power_scale == "db" else None
    agent = PpoAgent(obs_size, adapter.low, adapter.high, hyper, np.random.default_rng(seed), log_scale=log_scale)
    return agent, adapter


def train_scheme(scheme: SchemeId | str, config: NetworkConfig, hyper: PpoHyperparams, seed=None,
                 rps_per_episode: bool = False) -> TrainResult:
    return train(config, hyper, seed=seed, adapter=make_adapter(scheme, config, rps_per_episode))


def train_and_evaluate(scheme, config, hyper, seed=None, rps_per_episode=False):
    result = train_scheme(scheme, config, hyper, seed=seed, rps_per_episode=rps_per_episode)
    return result, evaluate(result, hyper, seed=seed)
