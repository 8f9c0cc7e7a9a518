"""IRS-assisted D2D network as an episodic MDP.

The agent observes the effective Tx->Rx gains under the current IRS
configuration, chooses transmit powers and phase shifts, and is rewarded
with the network sum-rate (minus a linear penalty for pairs that miss the
rate threshold).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .channel import (
    TWO_PI,
    ChannelRealization,
    PathLossParams,
    Position3,
    distance,
    effective_channel,
    sample_direct_channel,
    sample_reflective_channel,
)


class ContractViolation(ValueError):
    """An action or state that breaks the environment's contract."""


@dataclass(frozen=True)
class NetworkConfig:
    n_pairs: int = 5
    n_elements: int = 20
    cell_radius: float = 100.0
    max_pair_distance: float = 10.0
    min_pair_distance: float = 1.0
    bandwidth: float = 1e6
    noise_power: float = 1e-11
    p_max: float = 0.2
    r_min: float = 0.0
    episode_length: int = 100
    discount: float = 0.9
    path_loss: PathLossParams = field(default_factory=PathLossParams)
    irs_position: Position3 = field(default_factory=lambda: Position3(0.0, 0.0, 10.0))
    qos_penalty: float = 1.0
    per_step_fading: bool = False
    resample_layout: bool = False

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError(f"n_pairs must be >= 1, got {self.n_pairs}")
        if self.n_elements < 0:
            raise ValueError(f"n_elements must be >= 0, got {self.n_elements}")
        if not self.p_max > 0:
            raise ValueError(f"p_max must be positive, got {self.p_max}")
        if not self.r_min >= 0:
            raise ValueError(f"r_min must be >= 0, got {self.r_min}")
        if not 0 <= self.discount < 1:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if not self.noise_power > 0:
            raise ValueError(f"noise_power must be positive, got {self.noise_power}")
        if not self.cell_radius > 0:
            raise ValueError(f"cell_radius must be positive, got {self.cell_radius}")
        if not 0 < self.min_pair_distance <= self.max_pair_distance:
            raise ValueError("need 0 < min_pair_distance <= max_pair_distance")
        if self.episode_length < 1:
            raise ValueError(f"episode_length must be >= 1, got {self.episode_length}")
        if self.qos_penalty < 0:
            raise ValueError(f"qos_penalty must be >= 0, got {self.qos_penalty}")

    @property
    def p_floor(self) -> float:
        return 1e-6 * self.p_max

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class Layout:
    """Device positions plus the geometry-bound phases of every path.

    ``direct_phase`` fixes the phase of the direct links and ``los_phase``
    that of the LoS part of each IRS path; fading only redraws amplitudes
    (direct) and the NLoS scatter (reflective).
    """

    tx: np.ndarray  # (N, 3)
    rx: np.ndarray  # (N, 3)
    irs: np.ndarray  # (3,)
    direct_phase: np.ndarray  # (N, N)
    los_phase: np.ndarray  # (N, N, K)

    def distances(self, reference: float = 1.0):
        """Direct, Tx->IRS and IRS->Rx distances, floored at ``reference``."""
        d_direct = distance(self.tx[:, None, :], self.rx[None, :, :])
        d_tx_irs = distance(self.tx, self.irs)
        d_irs_rx = distance(self.rx, self.irs)
        return (np.maximum(d_direct, reference),
                np.maximum(d_tx_irs, reference),
                np.maximum(d_irs_rx, reference))


@dataclass
class NetworkState:
    effective_gains: np.ndarray  # (N, N) complex, [tx, rx]
    step_index: int = 0

    def features(self) -> np.ndarray:
        """Real/imag interleaved flattening, length 2 N^2."""
        g = self.effective_gains.reshape(-1)
        out = np.empty(2 * g.size)
        out[0::2] = g.real
        out[1::2] = g.imag
        return out


@dataclass
class Action:
    powers: np.ndarray
    thetas: np.ndarray

    def __post_init__(self):
        self.powers = np.asarray(self.powers, dtype=float).reshape(-1)
        self.thetas = np.asarray(self.thetas, dtype=float).reshape(-1)


@dataclass
class StepResult:
    next_state: NetworkState
    reward: float
    per_pair_rates: np.ndarray
    qos_violations: int
    done: bool
    sum_rate: float
    feasible_sum_rate: float


def sample_layout(config: NetworkConfig, rng: np.random.Generator) -> Layout:
    """Transmitters uniform in the cell disk, receivers uniform in an annulus
    ``[min_pair_distance, max_pair_distance]`` around their transmitter.

    Positions are drawn before the LoS phases and the phases element by
    element, so layouts with the same seed share a prefix across ``K``.
    """
    n = config.n_pairs
    irs = config.irs_position.as_array()
    r = config.cell_radius * np.sqrt(rng.uniform(size=n))
    a = rng.uniform(0.0, TWO_PI, size=n)
    tx = np.column_stack([irs[0] + r * np.cos(a), irs[1] + r * np.sin(a), np.zeros(n)])
    lo, hi = config.min_pair_distance, config.max_pair_distance
    rho = np.sqrt(rng.uniform(lo**2, hi**2, size=n))
    b = rng.uniform(0.0, TWO_PI, size=n)
    rx = tx + np.column_stack([rho * np.cos(b), rho * np.sin(b), np.zeros(n)])
    direct_phase = rng.uniform(0.0, TWO_PI, size=(n, n))
    los_phase = np.empty((n, n, config.n_elements))
    for k in range(config.n_elements):
        los_phase[:, :, k] = rng.uniform(0.0, TWO_PI, size=(n, n))
    return Layout(tx=tx, rx=rx, irs=irs, direct_phase=direct_phase, los_phase=los_phase)


def sample_channel(layout: Layout, params: PathLossParams, rng: np.random.Generator,
                   step: int = 0, reflective_rng: np.random.Generator | None = None) -> ChannelRealization:
    """One fading draw.  With a separate ``reflective_rng`` the direct links
    consume ``rng`` alone, so their fading does not depend on ``K``."""
    d_direct, d_tx_irs, d_irs_rx = layout.distances()
    direct = sample_direct_channel(d_direct, params, rng, phase=layout.direct_phase)
    rng = rng if reflective_rng is None else reflective_rng
    n, _, k_elems = layout.los_phase.shape
    reflective = np.empty((n, n, k_elems), dtype=complex)
    for k in range(k_elems):
        reflective[:, :, k] = sample_reflective_channel(
            d_tx_irs[:, None], d_irs_rx[None, :], params, rng, los_phase=layout.los_phase[:, :, k]
        )
    return ChannelRealization(direct=np.asarray(direct), reflective=reflective, valid_for_step=step)


def compute_sinr(gains: np.ndarray, powers: np.ndarray, noise_power: float) -> np.ndarray:
    """SINR at every receiver; ``gains`` is the ``[tx, rx]`` effective matrix
    (complex amplitudes or real power gains)."""
    g2 = np.abs(gains) ** 2 if np.iscomplexobj(gains) else np.asarray(gains, dtype=float)
    received = g2 * np.asarray(powers, dtype=float)[:, None]  # [tx, rx]
    signal = np.diag(received)
    # sum the cross terms directly; total - signal cancels badly at high SINR
    off_diagonal = ~np.eye(received.shape[0], dtype=bool)
    interference = np.where(off_diagonal, received, 0.0).sum(axis=0)
    return signal / (interference + noise_power)


def compute_rates(sinrs: np.ndarray, bandwidth: float) -> np.ndarray:
    return bandwidth * np.log2(1.0 + np.asarray(sinrs, dtype=float))


def shaped_reward(rates: np.ndarray, r_min: float, penalty: float) -> float:
    return float(rates.sum() - penalty * np.maximum(0.0, r_min - rates).sum())


def check_action(action: Action, config: NetworkConfig, tol: float = 1e-12) -> None:
    n, k = config.n_pairs, config.n_elements
    if action.powers.shape != (n,) or action.thetas.shape != (k,):
        raise ContractViolation(
            f"action shape ({action.powers.size} powers, {action.thetas.size} phases) "
            f"does not match N={n}, K={k}"
        )
    p = action.powers
    if np.any(~np.isfinite(p)) or np.any(p < config.p_floor * (1 - tol)) or np.any(p > config.p_max * (1 + tol)):
        raise ContractViolation(f"powers outside [{config.p_floor}, {config.p_max}]: {p}")
    t = action.thetas
    if np.any(~np.isfinite(t)) or np.any(t < -tol) or np.any(t > TWO_PI + tol):
        raise ContractViolation("phase shifts outside [0, 2*pi]")


class IrsD2DEnv:
    """Single-agent environment over one network deployment.

    The layout is drawn once from the seed (and again at every reset when
    ``config.resample_layout`` is set); small-scale fading is redrawn at
    each reset, or at every step with ``config.per_step_fading``.
    """

    def __init__(self, config: NetworkConfig, seed=None, layout_seed=None):
        self.config = config
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        layout_seq, fading_seq = seq.spawn(2)
        if layout_seed is not None:
            layout_seq = layout_seed
        self._layout_rng = np.random.default_rng(layout_seq)
        direct_seq, reflective_seq = fading_seq.spawn(2)
        self._fading_rng = np.random.default_rng(direct_seq)
        self._reflective_rng = np.random.default_rng(reflective_seq)
        self.layout: Layout | None = None
        self.channel: ChannelRealization | None = None
        self.state: NetworkState | None = None

    @property
    def n_pairs(self) -> int:
        return self.config.n_pairs

    @property
    def n_elements(self) -> int:
        return self.config.n_elements

    @property
    def observation_size(self) -> int:
        return 2 * self.config.n_pairs**2

    def reset(self) -> NetworkState:
        if self.layout is None or self.config.resample_layout:
            self.layout = sample_layout(self.config, self._layout_rng)
        self.channel = sample_channel(self.layout, self.config.path_loss, self._fading_rng,
                                      reflective_rng=self._reflective_rng)
        self._thetas = np.zeros(self.config.n_elements)
        self.state = NetworkState(self.gains(self._thetas), step_index=0)
        return self.state

    def gains(self, thetas) -> np.ndarray:
        return effective_channel(self.channel.direct, self.channel.reflective, thetas)

    def evaluate(self, action: Action):
        """Per-pair rates for ``action`` on the current channel (no state change)."""
        gains = self.gains(action.thetas)
        rates = compute_rates(compute_sinr(gains, action.powers, self.config.noise_power), self.config.bandwidth)
        return gains, rates

    def step(self, action: Action) -> StepResult:
        if self.state is None:
            raise ContractViolation("step() called before reset()")
        if self.state.step_index >= self.config.episode_length:
            raise ContractViolation("episode already finished; call reset()")
        check_action(action, self.config)
        cfg = self.config
        gains, rates = self.evaluate(action)
        reward = shaped_reward(rates, cfg.r_min, cfg.qos_penalty)
        served = rates >= cfg.r_min
        t = self.state.step_index + 1
        self._thetas = action.thetas.copy()
        if cfg.per_step_fading and t < cfg.episode_length:
            self.channel = sample_channel(self.layout, cfg.path_loss, self._fading_rng, step=t,
                                          reflective_rng=self._reflective_rng)
            gains = self.gains(self._thetas)
        self.state = NetworkState(gains, step_index=t)
        return StepResult(
            next_state=self.state,
            reward=reward,
            per_pair_rates=rates,
            qos_violations=int((~served).sum()),
            done=t == cfg.episode_length,
            sum_rate=float(rates.sum()),
            feasible_sum_rate=float(rates[served].sum()),
        )
