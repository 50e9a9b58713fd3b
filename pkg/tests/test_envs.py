import numpy as np
import pytest

from spikedt.envs import ENV_SPECS, expert_policy, make_env, random_policy


def rollout(name, policy, seed, policy_seed=None):
    env = make_env(name)
    state = env.reset(seed)
    rng = np.random.default_rng(seed if policy_seed is None else policy_seed)
    states, rewards = [state], []
    done = False
    while not done:
        tr = env.step(policy(state, rng))
        rewards.append(tr.reward)
        state = tr.next_state
        states.append(state)
        done = tr.done
    return np.asarray(states), np.asarray(rewards)


class TestSpecs:
    def test_documented_dimensions(self):
        s = ENV_SPECS
        assert (s["cartpole"].state_dim, s["cartpole"].n_actions, s["cartpole"].max_steps) == (4, 2, 500)
        assert (s["mountaincar"].state_dim, s["mountaincar"].n_actions, s["mountaincar"].max_steps) == (2, 3, 200)
        assert (s["acrobot"].state_dim, s["acrobot"].n_actions, s["acrobot"].max_steps) == (6, 3, 500)
        pend = s["pendulum"]
        assert (pend.state_dim, pend.action_kind, pend.max_steps) == (3, "continuous", 200)
        assert (pend.action_low, pend.action_high) == (-2.0, 2.0)

    def test_unknown_env_rejected(self):
        with pytest.raises(ValueError):
            make_env("lunarlander")


class TestReset:
    @pytest.mark.parametrize("name", list(ENV_SPECS))
    def test_same_seed_same_state(self, name):
        env = make_env(name)
        a = env.reset(42)
        b = env.reset(42)
        assert np.array_equal(a, b)

    def test_cartpole_initial_bounds(self):
        env = make_env("cartpole")
        for seed in range(200):
            state = env.reset(seed)
            assert np.all(np.abs(state) <= 0.05)

    def test_pendulum_initial_angle_range(self):
        env = make_env("pendulum")
        for seed in range(200):
            cos_t, sin_t, thd = env.reset(seed)
            theta = np.arctan2(sin_t, cos_t)
            assert -np.pi <= theta <= np.pi
            assert -1.0 <= thd <= 1.0

    def test_mountaincar_initial_valley(self):
        env = make_env("mountaincar")
        for seed in range(100):
            pos, vel = env.reset(seed)
            assert -0.6 <= pos <= -0.4 and vel == 0.0


class TestStep:
    def test_cartpole_reward_is_one_per_step(self):
        env = make_env("cartpole")
        env.reset(0)
        assert env.step(0).reward == 1.0

    def test_pendulum_upright_rest_zero_reward(self):
        env = make_env("pendulum")
        env.reset(0)
        env._theta = 0.0
        env._theta_dot = 0.0
        env._state = env._observation()
        assert env.step(np.array([0.0])).reward == 0.0

    def test_full_cartpole_episode_return_500(self):
        _, rewards = rollout("cartpole", expert_policy("cartpole"), seed=1)
        assert rewards.sum() == 500.0 and len(rewards) == 500

    def test_acrobot_goal_step_rewards_zero(self):
        _, rewards = rollout("acrobot", expert_policy("acrobot"), seed=0)
        assert rewards[-1] == 0.0  # terminal step
        assert np.all(rewards[:-1] == -1.0)

    def test_stepping_done_episode_rejected(self):
        env = make_env("mountaincar")
        env.reset(0)
        for _ in range(200):
            env.step(1)
        with pytest.raises(RuntimeError):
            env.step(1)

    def test_invalid_actions_rejected(self):
        env = make_env("cartpole")
        env.reset(0)
        with pytest.raises(ValueError):
            env.step(5)
        pend = make_env("pendulum")
        pend.reset(0)
        with pytest.raises(ValueError):
            pend.step(np.array([np.nan]))

    @pytest.mark.parametrize("name", list(ENV_SPECS))
    def test_episode_length_capped(self, name):
        spec = ENV_SPECS[name]
        _, rewards = rollout(name, random_policy(spec), seed=7)
        assert len(rewards) <= spec.max_steps

    @pytest.mark.parametrize("name", list(ENV_SPECS))
    def test_bitwise_determinism(self, name):
        spec = ENV_SPECS[name]
        a_states, a_rewards = rollout(name, random_policy(spec), 3, policy_seed=9)
        b_states, b_rewards = rollout(name, random_policy(spec), 3, policy_seed=9)
        assert np.array_equal(a_states, b_states)
        assert np.array_equal(a_rewards, b_rewards)

    def test_velocity_bounds_respected(self):
        spec = ENV_SPECS["mountaincar"]
        states, _ = rollout("mountaincar", random_policy(spec), 11)
        assert np.all(np.abs(states[:, 1]) <= 0.07)
        states, _ = rollout("pendulum", random_policy(ENV_SPECS["pendulum"]), 11)
        assert np.all(np.abs(states[:, 2]) <= 8.0)


class TestPolicies:
    def test_cartpole_expert_strong(self):
        returns = [rollout("cartpole", expert_policy("cartpole"), s)[1].sum()
                   for s in range(50)]
        assert np.mean(returns) >= 450.0

    def test_mountaincar_expert_solves(self):
        env_spec = ENV_SPECS["mountaincar"]
        for seed in range(50):
            states, rewards = rollout("mountaincar", expert_policy("mountaincar"), seed)
            assert len(rewards) <= env_spec.max_steps
            assert states[-1][0] >= 0.5  # reached the flag

    def test_acrobot_expert_reaches_goal(self):
        returns = [rollout("acrobot", expert_policy("acrobot"), s)[1].sum()
                   for s in range(30)]
        assert np.mean(returns) > -150.0

    def test_pendulum_expert_swings_up(self):
        returns = [rollout("pendulum", expert_policy("pendulum"), s)[1].sum()
                   for s in range(30)]
        assert np.mean(returns) > -400.0

    def test_random_cartpole_weak(self):
        spec = ENV_SPECS["cartpole"]
        returns = [rollout("cartpole", random_policy(spec), s)[1].sum()
                   for s in range(50)]
        assert np.mean(returns) <= 40.0
