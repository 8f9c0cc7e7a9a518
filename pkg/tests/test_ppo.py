import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from irsd2d.env import IrsD2DEnv, NetworkConfig
from irsd2d.mlp import flatten
from irsd2d.ppo import (
    JointAction,
    PpoAgent,
    PpoHyperparams,
    RunningMeanStd,
    Transition,
    advantage,
    clipped_surrogate,
    collect_rollout,
    evaluate,
    surrogate_and_grads,
    train,
    update,
    value_loss_and_grads,
)


def tr(reward=0.0, v=0.0, v_next=0.0, done=False, state=None, raw=None, logp=0.0):
    return Transition(state=state, action_raw=raw, log_prob_old=logp, reward=reward, value_est=v,
                      next_value_est=v_next, done=done)


def tiny_agent(obs=3, dim=2, seed=0, **kw):
    hyper = PpoHyperparams(hidden_sizes=(6, 5), **kw)
    return PpoAgent(obs, np.zeros(dim), np.ones(dim), hyper, np.random.default_rng(seed)), hyper


def fake_batch(agent, n, seed=0, adv_scale=1.0):
    rng = np.random.default_rng(seed)
    obs = agent.policy.net.sizes[0]
    out = []
    for _ in range(n):
        s = rng.standard_normal(obs)
        u, logp, _ = agent.policy.sample(s, rng)
        out.append(tr(reward=adv_scale * rng.standard_normal(), v=float(agent.value(s)),
                      v_next=float(agent.value(s)), state=s, raw=np.atleast_1d(u), logp=logp))
    return out


class TestAdvantage:
    def test_substitution(self):
        assert advantage(tr(1.0, 1.5, 2.0), 0.9) == pytest.approx(1.3)

    @given(r=st.floats(-10, 10), v=st.floats(-10, 10), vn=st.floats(-10, 10))
    def test_myopic(self, r, v, vn):
        assert advantage(tr(r, v, vn), 0.0) == pytest.approx(r - v)

    def test_terminal(self):
        assert advantage(tr(1.0, 1.0, 5.0, done=True), 0.9) == 0.0

    def test_time_limit_bootstrap(self):
        assert advantage(tr(1.0, 1.0, 5.0, done=True), 0.9, bootstrap_on_done=True) == pytest.approx(4.5)

    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=20),
           st.floats(0.0, 0.99))
    def test_telescoping_identity(self, steps, zeta):
        rewards = [r for r, _ in steps]
        values = [v for _, v in steps]
        n = len(steps)
        trs = [tr(rewards[t], values[t], values[t + 1] if t + 1 < n else 123.0, done=t == n - 1) for t in range(n)]
        lhs = sum(zeta**t * advantage(x, zeta) for t, x in enumerate(trs))
        rhs = sum(zeta**t * r for t, r in enumerate(rewards)) - values[0]
        assert lhs == pytest.approx(rhs, abs=1e-8)


class TestClippedSurrogate:
    @pytest.mark.parametrize("ratio, adv, expected", [(1.5, 1.0, 1.2), (0.5, -1.0, -0.8), (1.0, 3.7, 3.7),
                                                      (1.0, -2.0, -2.0)])
    def test_examples(self, ratio, adv, expected):
        assert clipped_surrogate(ratio, adv, 0.2) == pytest.approx(expected)

    @given(r=st.floats(1e-3, 10.0), a=st.floats(-100, 100), eps=st.floats(0.01, 0.99))
    def test_pessimistic_bound(self, r, a, eps):
        assert clipped_surrogate(r, a, eps) <= r * a + 1e-9

    def test_nonpositive_ratio(self):
        with pytest.raises(ValueError):
            clipped_surrogate(0.0, 1.0, 0.2)

    def test_vectorized(self):
        out = clipped_surrogate(np.array([1.5, 0.5]), np.array([1.0, -1.0]), 0.2)
        np.testing.assert_allclose(out, [1.2, -0.8])


class TestSurrogateGradients:
    def test_ratio_one_at_update_start(self):
        agent, _ = tiny_agent()
        batch = fake_batch(agent, 16)
        s = np.array([t.state for t in batch])
        u = np.array([t.action_raw for t in batch])
        lp = np.array([t.log_prob_old for t in batch])
        adv = np.random.default_rng(1).standard_normal(16)
        obj, _, ratio = surrogate_and_grads(agent.policy, s, u, lp, adv, 0.2)
        np.testing.assert_allclose(ratio, 1.0, atol=1e-10)
        assert obj == pytest.approx(adv.mean(), abs=1e-10)

    def test_finite_differences(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for case in range(100):
            agent, _ = tiny_agent(obs=2, dim=2, seed=case)
            pol = agent.policy
            s = rng.standard_normal((4, 2))
            mean, _ = pol.net.forward(s)
            u = mean + rng.standard_normal(mean.shape) * 0.5
            # old log-probs from a nearby policy so some ratios leave the clip band
            lp = pol.log_prob(s, u) + rng.normal(0, 0.1, 4)
            adv = rng.standard_normal(4)

            def f():
                return surrogate_and_grads(pol, s, u, lp, adv, 0.2)[0]

            _, grads, ratio = surrogate_and_grads(pol, s, u, lp, adv, 0.2)
            # skip cases sitting on a clip kink where the derivative is undefined
            if np.any(np.abs(np.abs(ratio - 1) - 0.2) < 1e-3):
                continue
            h = 1e-5
            num = []
            for p in pol.params:
                g = np.zeros_like(p)
                for i in np.ndindex(p.shape):
                    old = p[i]
                    p[i] = old + h
                    fp = f()
                    p[i] = old - h
                    fm = f()
                    p[i] = old
                    g[i] = (fp - fm) / (2 * h)
                num.append(g)
            a, b = flatten(grads), flatten(num)
            worst = max(worst, np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a) + np.abs(b))))
        assert worst < 1e-3

    def test_value_gradient(self):
        agent, _ = tiny_agent()
        rng = np.random.default_rng(3)
        s = rng.standard_normal((5, 3))
        y = rng.standard_normal(5)
        _, grads = value_loss_and_grads(agent.value, s, y, 0.5)
        p = agent.value.params[0]
        h = 1e-6
        old = p[0, 0]
        p[0, 0] = old + h
        lp = value_loss_and_grads(agent.value, s, y, 0.5)[0]
        p[0, 0] = old - h
        lm = value_loss_and_grads(agent.value, s, y, 0.5)[0]
        p[0, 0] = old
        assert grads[0][0, 0] == pytest.approx(-0.5 * (lp - lm) / (2 * h), rel=1e-5)


class TestUpdate:
    def test_zero_learning_rate(self):
        agent, hyper = tiny_agent(learning_rate=0.0, batch_size=8)
        before = flatten(agent.policy.params + agent.value.params).copy()
        update(agent, fake_batch(agent, 8), hyper, np.random.default_rng(0))
        np.testing.assert_array_equal(flatten(agent.policy.params + agent.value.params), before)

    def test_zero_advantage_leaves_policy(self):
        agent, hyper = tiny_agent(learning_rate=1e-2, batch_size=8, normalize_advantages=False)
        batch = fake_batch(agent, 8)
        for t in batch:
            # r + zeta V(s') - V(s) = 0 with V(s') = V(s)
            t.reward = (1 - hyper.discount) * t.value_est
        pol_before = flatten(agent.policy.params).copy()
        val_before = flatten(agent.value.params).copy()
        update(agent, batch, hyper, np.random.default_rng(0))
        np.testing.assert_allclose(flatten(agent.policy.params), pol_before, atol=1e-15)
        # the one-step value error equals -A, so the value net is also at rest
        np.testing.assert_allclose(flatten(agent.value.params), val_before, atol=1e-15)

    def test_batch_too_small(self):
        agent, hyper = tiny_agent(batch_size=8)
        with pytest.raises(ValueError, match="batch_size"):
            update(agent, fake_batch(agent, 7), hyper, np.random.default_rng(0))

    def test_bandit_converges(self):
        hyper = PpoHyperparams(hidden_sizes=(8,), batch_size=32, epochs_per_update=1, learning_rate=1e-2,
                               strict_terminal=True)
        agent = PpoAgent(1, [0.0], [1.0], hyper, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        s = np.zeros(1)
        for _ in range(2000):
            batch = []
            for _ in range(32):
                u, logp, a = agent.act(s, rng)
                batch.append(tr(reward=-(a[0] - 0.5) ** 2, v=float(agent.value(s)), done=True, state=s,
                                raw=u, logp=logp))
            update(agent, batch, hyper, rng)
        assert agent.policy.deterministic(s)[0] == pytest.approx(0.5, abs=0.05)


def env_agent(seed=0, T=5, agent_seed=0):
    env = IrsD2DEnv(NetworkConfig(n_pairs=2, n_elements=2, episode_length=T), seed=seed)
    act = JointAction(env.config)
    hyper = PpoHyperparams(hidden_sizes=(6, 5))
    agent = PpoAgent(env.observation_size, act.low, act.high, hyper, np.random.default_rng(agent_seed),
                     log_scale=act.log_scale)
    return env, agent


class TestRollout:

    def test_single_step(self):
        env, agent = env_agent()
        out = collect_rollout(env, agent, 1, np.random.default_rng(0))
        assert len(out) == 1 and out[0].done

    def test_length_and_done_flags(self):
        env, agent = env_agent(T=7)
        out = collect_rollout(env, agent, 7, np.random.default_rng(0))
        assert [t.done for t in out] == [False] * 6 + [True]

    def test_deterministic_given_seed(self):
        runs = []
        for _ in range(2):
            env, agent = env_agent(seed=3, agent_seed=4)
            agent.policy.log_std[...] = math.log(1e-3)
            runs.append(collect_rollout(env, agent, 5, np.random.default_rng(5)))
        for a, b in zip(*runs):
            np.testing.assert_array_equal(a.action_raw, b.action_raw)
            assert a.reward == b.reward

    def test_replay_oracle(self):
        env, agent = env_agent(seed=6, agent_seed=1)
        out = collect_rollout(env, agent, 5, np.random.default_rng(2))
        adapter = JointAction(env.config)
        # fading is static within the episode, so the channel is still valid
        for t in out:
            a = agent.policy.squash(t.action_raw)
            _, rates = env.evaluate(adapter.to_action(a, None))
            assert t.reward == pytest.approx(rates.sum(), rel=1e-12)

    def test_log_prob_matches_sampling_policy(self):
        env, agent = env_agent(seed=1)
        for t in collect_rollout(env, agent, 5, np.random.default_rng(0)):
            assert t.log_prob_old == pytest.approx(float(agent.policy.log_prob(t.state, t.action_raw)))


class TestTrain:
    def config(self):
        return NetworkConfig(n_pairs=2, n_elements=2, episode_length=8, cell_radius=10.0)

    def test_zero_episodes(self):
        hyper = PpoHyperparams(max_episodes=0, hidden_sizes=(4,))
        res = train(self.config(), hyper, seed=0)
        assert res.curve == []
        fresh = train(self.config(), hyper, seed=0)
        np.testing.assert_array_equal(flatten(res.agent.policy.params), flatten(fresh.agent.policy.params))

    def test_curve_length_and_reproducibility(self):
        hyper = PpoHyperparams(max_episodes=6, batch_size=16, hidden_sizes=(8,), eval_episodes=2)
        a = train(self.config(), hyper, seed=1)
        b = train(self.config(), hyper, seed=1)
        assert len(a.curve) == 6
        assert [r.mean_reward for r in a.curve] == [r.mean_reward for r in b.curve]
        ea, eb = evaluate(a, hyper, seed=1), evaluate(b, hyper, seed=1)
        assert ea.mean_sum_rate == eb.mean_sum_rate

    def test_hyperparam_validation(self):
        for kw in ({"clip_epsilon": 0.0}, {"clip_epsilon": 1.0}, {"discount": 1.0}, {"batch_size": 0},
                   {"optimizer": "lbfgs"}):
            with pytest.raises(ValueError):
                PpoHyperparams(**kw)

    def test_table_defaults(self):
        h = PpoHyperparams()
        assert (h.clip_epsilon, h.discount, h.learning_rate, h.batch_size) == (0.2, 0.9, 1e-4, 128)
        assert h.hidden_sizes == (128, 64) and h.optimizer == "sgd"


def test_running_normalizer_matches_batch_stats():
    rng = np.random.default_rng(0)
    data = rng.normal(3.0, 2.0, size=(1000, 4))
    rms = RunningMeanStd(4)
    for chunk in np.array_split(data, 17):
        rms.update(chunk)
    np.testing.assert_allclose(rms.mean, data.mean(axis=0), rtol=1e-5)
    np.testing.assert_allclose(rms.var, data.var(axis=0), rtol=1e-4)
