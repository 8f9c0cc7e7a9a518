"""PPO with the clipped surrogate and one-step TD advantages.

Training alternates between collecting whole episodes with the current
(squashed-Gaussian) policy and running a few epochs of minibatch SGD on

    mean(min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)) - c_v * mean((V(s) - y)^2)

where ``A = r + discount * V(s') - V(s)`` and ``y = r + discount * V(s')``
uses the value network frozen at the start of the update.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .env import TWO_PI, Action, IrsD2DEnv, NetworkConfig
from .mlp import GaussianPolicy, ValueFunction, gaussian_log_prob, make_optimizer


@dataclass(frozen=True)
class PpoHyperparams:
    clip_epsilon: float = 0.2
    discount: float = 0.9
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs_per_update: int = 4
    value_loss_coeff: float = 0.5
    max_episodes: int = 200
    steps_per_episode: int | None = None  # None: use NetworkConfig.episode_length
    hidden_sizes: tuple = (128, 64)
    init_std: float = 0.5
    optimizer: str = "sgd"
    power_scale: str = "db"  # "db": powers squashed uniformly in dB; "linear": uniformly in watts
    normalize_advantages: bool = True
    strict_terminal: bool = False
    reward_scale: float | None = None  # None: (1 - discount) / (bandwidth * n_pairs)
    eval_episodes: int = 500
    eval_steps: int | None = None  # None: steps_per_episode

    def __post_init__(self):
        if not 0 < self.clip_epsilon < 1:
            raise ValueError(f"clip_epsilon must lie in (0, 1), got {self.clip_epsilon}")
        if not 0 <= self.discount < 1:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs_per_update < 1:
            raise ValueError("epochs_per_update must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.max_episodes < 0:
            raise ValueError("max_episodes must be >= 0")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.power_scale not in ("db", "linear"):
            raise ValueError(f"power_scale must be 'db' or 'linear', got {self.power_scale!r}")


@dataclass
class Transition:
    state: np.ndarray
    action_raw: np.ndarray
    log_prob_old: float
    reward: float
    value_est: float
    next_value_est: float
    done: bool
    next_state: np.ndarray | None = None
    sum_rate: float = 0.0
    feasible_sum_rate: float = 0.0
    qos_violations: int = 0


def advantage(t: Transition, discount: float, bootstrap_on_done: bool = False) -> float:
    """One-step TD advantage ``r + discount * V(s') - V(s)``.

    ``V(s')`` is taken as zero on ``done`` unless ``bootstrap_on_done`` marks
    the end as a time limit rather than a true terminal.
    """
    next_v = t.next_value_est if (bootstrap_on_done or not t.done) else 0.0
    return t.reward + discount * next_v - t.value_est


def clipped_surrogate(ratio, adv, epsilon: float):
    ratio = np.asarray(ratio, dtype=float)
    if np.any(ratio <= 0):
        raise ValueError("probability ratios must be positive")
    out = np.minimum(ratio * adv, np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * adv)
    return float(out) if out.ndim == 0 else out


class RunningMeanStd:
    """Streaming per-feature mean/variance (parallel-merge form)."""

    def __init__(self, size: int, clip: float = 10.0):
        self.mean = np.zeros(size)
        self.var = np.ones(size)
        self.count = 1e-4
        self.clip = clip

    def update(self, x):
        x = np.atleast_2d(x)
        b_mean, b_var, b_count = x.mean(axis=0), x.var(axis=0), x.shape[0]
        delta = b_mean - self.mean
        total = self.count + b_count
        self.mean = self.mean + delta * b_count / total
        m2 = self.var * self.count + b_var * b_count + delta**2 * self.count * b_count / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x):
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-12), -self.clip, self.clip)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": self.count}

    @classmethod
    def from_dict(cls, d):
        obj = cls(len(d["mean"]))
        obj.mean = np.asarray(d["mean"], dtype=float)
        obj.var = np.asarray(d["var"], dtype=float)
        obj.count = float(d["count"])
        return obj


class JointAction:
    """Agent controls every transmit power and every IRS phase."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        n, k = config.n_pairs, config.n_elements
        self.low = np.concatenate([np.full(n, config.p_floor), np.zeros(k)])
        self.high = np.concatenate([np.full(n, config.p_max), np.full(k, TWO_PI)])
        self.log_scale = np.arange(n + k) < n

    def env_config(self) -> NetworkConfig:
        return self.config

    def reset(self, rng: np.random.Generator) -> None:
        pass

    def to_action(self, a: np.ndarray, rng: np.random.Generator) -> Action:
        n = self.config.n_pairs
        return Action(powers=a[:n], thetas=a[n:])


class PpoAgent:
    def __init__(self, obs_size: int, low, high, hyper: PpoHyperparams, rng: np.random.Generator,
                 log_scale=None):
        self.hyper = hyper
        self.policy = GaussianPolicy(obs_size, low, high, hidden=hyper.hidden_sizes, rng=rng,
                                     init_std=hyper.init_std, log_scale=log_scale)
        self.value = ValueFunction(obs_size, hidden=hyper.hidden_sizes, rng=rng)
        self.obs_norm = RunningMeanStd(obs_size)
        self.policy_opt = make_optimizer(hyper.optimizer, self.policy.params, hyper.learning_rate)
        self.value_opt = make_optimizer(hyper.optimizer, self.value.params, hyper.learning_rate)

    @classmethod
    def from_parts(cls, policy: GaussianPolicy, value: ValueFunction, obs_norm: RunningMeanStd,
                   hyper: PpoHyperparams) -> "PpoAgent":
        """Reassemble an agent from restored networks (fresh optimizer state)."""
        agent = cls.__new__(cls)
        agent.hyper = hyper
        agent.policy, agent.value, agent.obs_norm = policy, value, obs_norm
        agent.policy_opt = make_optimizer(hyper.optimizer, policy.params, hyper.learning_rate)
        agent.value_opt = make_optimizer(hyper.optimizer, value.params, hyper.learning_rate)
        return agent

    def act(self, obs_normed, rng: np.random.Generator):
        return self.policy.sample(obs_normed, rng)

    def act_deterministic(self, obs) -> np.ndarray:
        return self.policy.deterministic(self.obs_norm.normalize(obs))


def surrogate_and_grads(policy: GaussianPolicy, states, actions_raw, log_probs_old, advantages,
                        epsilon: float):
    """Mean clipped surrogate over a batch and its gradient w.r.t. ``policy.params``."""
    mean, cache = policy.net.forward(states)
    log_std = policy.log_std
    std = np.exp(log_std)
    z = (actions_raw - mean) / std
    log_prob = gaussian_log_prob(mean, log_std, actions_raw)
    ratio = np.exp(log_prob - log_probs_old)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantages
    objective = float(np.mean(np.minimum(unclipped, clipped)))
    # gradient flows only through the samples whose unclipped term is the minimum
    active = unclipped <= clipped
    w = np.where(active, advantages * ratio, 0.0) / len(advantages)
    grad_mean = w[:, None] * z / std
    grad_log_std = np.sum(w[:, None] * (z**2 - 1.0), axis=0)
    grads = policy.net.backward(cache, grad_mean) + [grad_log_std]
    return objective, grads, ratio


def value_loss_and_grads(value: ValueFunction, states, targets, coeff: float):
    """Squared-error loss and the ascent gradient of ``-coeff * loss``."""
    out, cache = value.net.forward(states)
    err = out[:, 0] - targets
    loss = float(np.mean(err**2))
    grad_out = (-coeff * 2.0 * err / len(targets))[:, None]
    return loss, value.net.backward(cache, grad_out)


def _batch_arrays(transitions, hyper: PpoHyperparams):
    states = np.array([t.state for t in transitions])
    actions = np.array([t.action_raw for t in transitions]).reshape(len(transitions), -1)
    logp = np.array([t.log_prob_old for t in transitions])
    bootstrap = not hyper.strict_terminal
    adv = np.array([advantage(t, hyper.discount, bootstrap_on_done=bootstrap) for t in transitions])
    targets = np.array([
        t.reward + hyper.discount * (t.next_value_est if (bootstrap or not t.done) else 0.0)
        for t in transitions
    ])
    return states, actions, logp, adv, targets


def update(agent: PpoAgent, transitions: list[Transition], hyper: PpoHyperparams,
           rng: np.random.Generator) -> dict:
    """Run ``epochs_per_update`` passes of minibatch SGD over ``transitions``.

    Each pass reshuffles and splits into ``len // batch_size`` minibatches of
    exactly ``batch_size``.  Value targets use the stored next-state values,
    i.e. the value network as frozen when the data was collected.
    """
    d = hyper.batch_size
    if len(transitions) < d:
        raise ValueError(f"need at least batch_size={d} transitions, got {len(transitions)}")
    states, actions, logp, adv, targets = _batch_arrays(transitions, hyper)
    if hyper.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n_mb = len(transitions) // d
    stats = {"surrogate": [], "value_loss": [], "clip_fraction": []}
    for _ in range(hyper.epochs_per_update):
        perm = rng.permutation(len(transitions))
        for j in range(n_mb):
            idx = perm[j * d:(j + 1) * d]
            obj, pgrads, ratio = surrogate_and_grads(agent.policy, states[idx], actions[idx], logp[idx],
                                                     adv[idx], hyper.clip_epsilon)
            vloss, vgrads = value_loss_and_grads(agent.value, states[idx], targets[idx], hyper.value_loss_coeff)
            agent.policy_opt.step(pgrads)
            agent.policy.touch()
            agent.value_opt.step(vgrads)
            agent.value.touch()
            stats["surrogate"].append(obj)
            stats["value_loss"].append(vloss)
            stats["clip_fraction"].append(float(np.mean(np.abs(ratio - 1.0) > hyper.clip_epsilon)))
    return {k: float(np.mean(v)) for k, v in stats.items()}


def collect_rollout(env: IrsD2DEnv, agent: PpoAgent, steps: int, rng: np.random.Generator,
                    adapter=None, reward_scale: float = 1.0, update_normalizer: bool = True) -> list[Transition]:
    """Run one episode of ``steps`` steps with actions sampled from the policy."""
    adapter = JointAction(env.config) if adapter is None else adapter
    state = env.reset()
    adapter.reset(rng)
    raw = state.features()
    if update_normalizer:
        agent.obs_norm.update(raw)
    obs = agent.obs_norm.normalize(raw)
    value = float(agent.value(obs))
    out = []
    for _ in range(steps):
        u, logp, a = agent.act(obs, rng)
        result = env.step(adapter.to_action(a, rng))
        raw_next = result.next_state.features()
        if update_normalizer:
            agent.obs_norm.update(raw_next)
        next_obs = agent.obs_norm.normalize(raw_next)
        next_value = float(agent.value(next_obs))
        done = result.done or len(out) == steps - 1
        out.append(Transition(
            state=obs, action_raw=np.atleast_1d(u), log_prob_old=logp, reward=result.reward * reward_scale,
            value_est=value, next_value_est=next_value, done=done, next_state=next_obs,
            sum_rate=result.sum_rate, feasible_sum_rate=result.feasible_sum_rate,
            qos_violations=result.qos_violations,
        ))
        obs, value = next_obs, next_value
    return out


@dataclass
class EpisodeRecord:
    episode: int
    mean_reward: float
    mean_sum_rate: float
    qos_violation_rate: float
    wall_clock_s: float


@dataclass
class EvalResult:
    mean_sum_rate: float
    std_sum_rate: float
    mean_feasible_sum_rate: float
    qos_violation_rate: float
    episode_sum_rates: np.ndarray = field(repr=False)
    episode_feasible_sum_rates: np.ndarray = field(repr=False)


@dataclass
class TrainResult:
    agent: PpoAgent
    curve: list[EpisodeRecord]
    adapter: object
    config: NetworkConfig


def _streams(seed):
    """Independent generators: layout/fading for training, fading for
    evaluation, policy sampling, scheme randomness."""
    seq = np.random.SeedSequence(seed)
    env_seq, eval_seq, policy_seq, scheme_seq = seq.spawn(4)
    return env_seq, eval_seq, policy_seq, scheme_seq


def default_reward_scale(config: NetworkConfig, hyper: PpoHyperparams) -> float:
    if hyper.reward_scale is not None:
        return hyper.reward_scale
    return (1.0 - hyper.discount) / (config.bandwidth * config.n_pairs)


def train(config: NetworkConfig, hyper: PpoHyperparams, seed=None, adapter=None) -> TrainResult:
    """Run ``max_episodes`` episodes of collect -> advantage -> update.

    Updates fire once at least ``batch_size`` transitions have accumulated
    since the previous update.  The learning curve holds one record per
    episode with the mean (unscaled) reward.
    """
    adapter = JointAction(config) if adapter is None else adapter
    env_config = adapter.env_config()
    steps = hyper.steps_per_episode or env_config.episode_length
    env_config = env_config.replace(episode_length=steps)
    env_seq, _, policy_seq, scheme_seq = _streams(seed)
    layout_seq, train_fading_seq = env_seq.spawn(2)
    env = IrsD2DEnv(env_config, seed=train_fading_seq, layout_seed=layout_seq)
    policy_rng = np.random.default_rng(policy_seq)
    scheme_rng = np.random.default_rng(scheme_seq)
    log_scale = adapter.log_scale if hyper.power_scale == "db" else None
    agent = PpoAgent(env.observation_size, adapter.low, adapter.high, hyper, policy_rng, log_scale=log_scale)
    scale = default_reward_scale(env_config, hyper)

    curve: list[EpisodeRecord] = []
    buffer: list[Transition] = []
    t0 = time.perf_counter()
    for episode in range(hyper.max_episodes):
        episode_rollout = collect_rollout(env, agent, steps, policy_rng, adapter=_SchemeRng(adapter, scheme_rng),
                                          reward_scale=scale)
        buffer.extend(episode_rollout)
        curve.append(EpisodeRecord(
            episode=episode,
            mean_reward=float(np.mean([t.reward for t in episode_rollout])) / scale,
            mean_sum_rate=float(np.mean([t.sum_rate for t in episode_rollout])),
            qos_violation_rate=float(np.mean([t.qos_violations for t in episode_rollout])) / env_config.n_pairs,
            wall_clock_s=time.perf_counter() - t0,
        ))
        if len(buffer) >= hyper.batch_size:
            update(agent, buffer, hyper, policy_rng)
            buffer = []
    return TrainResult(agent=agent, curve=curve, adapter=adapter, config=env_config)


class _SchemeRng:
    """Routes scheme-side randomness (e.g. random phases) to its own stream."""

    def __init__(self, adapter, rng):
        self.adapter, self.rng = adapter, rng

    def reset(self, _rng):
        self.adapter.reset(self.rng)

    def to_action(self, a, _rng):
        return self.adapter.to_action(a, self.rng)


def evaluate(result: TrainResult, hyper: PpoHyperparams, seed=None, episodes: int | None = None,
             steps: int | None = None) -> EvalResult:
    """Average sum-rate of the deterministic (mean-action) policy.

    Evaluation runs on the training deployment with a fresh fading stream;
    the same ``seed`` gives the same channel draws for every scheme.
    """
    episodes = episodes or hyper.eval_episodes
    steps = steps or hyper.eval_steps or result.config.episode_length
    env_seq, eval_seq, _, scheme_seq = _streams(seed)
    layout_seq, _ = env_seq.spawn(2)
    env = IrsD2DEnv(result.config.replace(episode_length=steps), seed=eval_seq, layout_seed=layout_seq)
    scheme_rng = np.random.default_rng(scheme_seq.spawn(1)[0])
    adapter = result.adapter
    agent = result.agent
    sums, feas, viol = [], [], []
    for _ in range(episodes):
        state = env.reset()
        adapter.reset(scheme_rng)
        ep_sum, ep_feas, ep_viol = [], [], []
        for _ in range(steps):
            a = agent.act_deterministic(state.features())
            r = env.step(adapter.to_action(a, scheme_rng))
            ep_sum.append(r.sum_rate)
            ep_feas.append(r.feasible_sum_rate)
            ep_viol.append(r.qos_violations)
            state = r.next_state
        sums.append(np.mean(ep_sum))
        feas.append(np.mean(ep_feas))
        viol.append(np.mean(ep_viol) / env.config.n_pairs)
    sums, feas = np.array(sums), np.array(feas)
    return EvalResult(
        mean_sum_rate=float(sums.mean()),
        std_sum_rate=float(sums.std()),
        mean_feasible_sum_rate=float(feas.mean()),
        qos_violation_rate=float(np.mean(viol)),
        episode_sum_rates=sums,
        episode_feasible_sum_rates=feas,
    )


CURVE_FIELDS = ("episode", "mean_reward", "qos_violation_rate", "wall_clock_s")


def write_curve_csv(path, curve: list[EpisodeRecord], scheme: str = "PROPOSED", header_lines=(),
                    include_wall_clock: bool = True) -> None:
    fields = ["scheme", *CURVE_FIELDS]
    if not include_wall_clock:
        fields.remove("wall_clock_s")
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        w = csv.writer(f)
        w.writerow(fields)
        for rec in curve:
            row = {"scheme": scheme, "episode": rec.episode, "mean_reward": repr(rec.mean_reward),
                   "qos_violation_rate": repr(rec.qos_violation_rate), "wall_clock_s": f"{rec.wall_clock_s:.3f}"}
            w.writerow([row[k] for k in fields])

