"""
CPO tests. The toy problem is a one-step bandit with observation o = +-1, a
linear-Gaussian policy a ~ N(w o + b, 0.1^2), reward -(a - (2o + 1))^2 and
cost a with budget 0.5, so the constrained optimum is w = 2, b = 0.5.
"""

from dataclasses import replace

import numpy as np
import pytest

from config import CpoConfig
from services.cpo_service import (TrajectoryBatch, cg_solve, cpo_update, estimate_advantages, fit_values, gae,
                                  solve_trust_region)
from services.errors import ContractViolation
from services.policy_service import MLP, GaussianPolicy, ValueFunction

SIGMA = 0.1
BUDGET = 0.5


def toy_policy(w, b):
    return GaussianPolicy(MLP([1, 1]), np.array([w, b, np.log(SIGMA)]), np.ones(1), learn_log_std=False)


def antithetic_noise(rng, half=5000):
    eps = rng.standard_normal(half)
    eps = np.concatenate([eps, -eps])
    return eps / np.sqrt(np.mean(eps ** 2))


def toy_batch(policy, eps):
    obs = np.concatenate([np.ones_like(eps), -np.ones_like(eps)])[:, None]
    mean, std = policy.forward(obs)
    actions = mean + std * np.concatenate([eps, eps])[:, None]
    rewards = -(actions[:, 0] - (2.0 * obs[:, 0] + 1.0)) ** 2
    batch = TrajectoryBatch(observations=obs, actions=actions, log_probs=policy.log_prob(obs, actions),
                            rewards=rewards, costs=actions[:, 0].copy(), episode_lengths=np.ones(len(obs), dtype=int))
    return estimate_advantages(batch, None, None, gamma=1.0, gamma_c=1.0, lam=0.95)


TOY_CONFIG = CpoConfig(max_kl=0.05, cost_slack=1e-4, line_search='best', backtrack_steps=25)


class TestAdvantages:
    def test_lambda_one_is_return_minus_value(self):
        rewards = np.array([1.0, 2.0, 3.0])
        values = np.array([0.5, -1.0, 2.0])
        gamma = 0.9
        returns = np.array([1 + 0.9 * 2 + 0.81 * 3, 2 + 0.9 * 3, 3.0])
        np.testing.assert_allclose(gae(rewards, values, gamma, 1.0), returns - values)

    def test_lambda_zero_is_td_error(self):
        rewards = np.array([1.0, 2.0, 3.0])
        values = np.array([0.5, -1.0, 2.0])
        expected = [1.0 + 0.9 * -1.0 - 0.5, 2.0 + 0.9 * 2.0 + 1.0, 3.0 - 2.0]
        np.testing.assert_allclose(gae(rewards, values, 0.9, 0.0), expected)

    def test_hand_computed_episode(self):
        # deltas: 1 + 0.5*2 - 1 = 1, 0 + 0.5*0 - 2 = -2, 1 - 0 = 1
        rewards = np.array([1.0, 0.0, 1.0])
        values = np.array([1.0, 2.0, 0.0])
        # gamma * lambda = 0.25
        expected = [1.0 + 0.25 * (-2.0 + 0.25 * 1.0), -2.0 + 0.25 * 1.0, 1.0]
        np.testing.assert_allclose(gae(rewards, values, 0.5, 0.5), expected)

    def test_episodes_do_not_bootstrap_across_boundaries(self):
        batch = TrajectoryBatch(observations=np.zeros((5, 1)), actions=np.zeros((5, 1)), log_probs=np.zeros(5),
                                rewards=np.array([1.0, 1.0, 1.0, 5.0, 5.0]), costs=np.array([0.0, 1.0, 0.0, 1.0, 1.0]),
                                episode_lengths=[3, 2])
        filled = estimate_advantages(batch, None, None, gamma=1.0, gamma_c=1.0, lam=1.0, normalize=False)
        np.testing.assert_allclose(filled.reward_advantages, [3.0, 2.0, 1.0, 10.0, 5.0])
        np.testing.assert_allclose(filled.cost_targets, [1.0, 1.0, 0.0, 2.0, 1.0])
        assert batch.cost_return_mean() == pytest.approx(1.5)

    def test_misaligned_batch(self):
        with pytest.raises(ContractViolation):
            TrajectoryBatch(observations=np.zeros((4, 1)), actions=np.zeros((4, 1)), log_probs=np.zeros(4),
                            rewards=np.zeros(4), costs=np.zeros(4), episode_lengths=[3, 2])


class TestConjugateGradient:
    def test_identity(self):
        g = np.array([1.0, -2.0, 3.0])
        result = cg_solve(lambda v: v, g)
        np.testing.assert_allclose(result.x, g)
        assert result.iterations == 1
        assert result.converged

    def test_random_spd(self, rng):
        m = rng.standard_normal((50, 50))
        h = m @ m.T + 50 * np.eye(50)
        g = rng.standard_normal(50)
        result = cg_solve(lambda v: h @ v, g, iterations=50, tol=1e-10)
        np.testing.assert_allclose(result.x, np.linalg.solve(h, g), rtol=1e-8, atol=1e-10)
        assert result.relative_residual <= 1e-10

    def test_zero_right_hand_side(self):
        result = cg_solve(lambda v: 2 * v, np.zeros(4))
        np.testing.assert_array_equal(result.x, np.zeros(4))
        assert result.iterations == 0


class TestTrustRegion:
    def test_cost_free_step_fills_trust_region(self):
        case, lam, nu = solve_trust_region(q=4.0, r=0.0, s=0.0, c=-1.0, max_kl=0.02, cost_free=True)
        assert (case, nu) == (4, 0.0)
        # x = v / lam has 1/2 x^T H x = q / (2 lam^2)
        assert 4.0 / (2 * lam ** 2) == pytest.approx(0.02)

    def test_infeasible_is_recovery(self):
        case, lam, nu = solve_trust_region(q=1.0, r=0.1, s=0.01, c=1.0, max_kl=0.01, cost_free=False)
        assert case == 0
        assert lam == 0.0
        assert nu == pytest.approx(np.sqrt(2 * 0.01 / 0.01), rel=1e-5)

    def test_no_cost_direction_with_met_budget(self):
        case, lam, nu = solve_trust_region(q=1.0, r=0.0, s=0.0, c=0.0, max_kl=0.01, cost_free=False)
        assert (case, nu) == (4, 0.0)
        assert lam == pytest.approx(np.sqrt(1.0 / 0.02))

    def test_no_cost_direction_with_violated_budget(self):
        assert solve_trust_region(q=1.0, r=0.0, s=0.0, c=1.0, max_kl=0.01, cost_free=False) == (0, 0.0, 0.0)


class TestCpoUpdate:
    def test_zero_advantages_leave_policy_unchanged(self, rng):
        policy = toy_policy(1.0, 0.0)
        obs = rng.standard_normal((6, 1))
        actions = policy.sample(obs, rng)
        batch = TrajectoryBatch(observations=obs, actions=actions, log_probs=policy.log_prob(obs, actions),
                                rewards=np.full(6, -1.0), costs=np.zeros(6), episode_lengths=np.ones(6, dtype=int))
        batch = estimate_advantages(batch, None, None, 1.0, 1.0, 0.95)
        new, diagnostics = cpo_update(batch, policy, TOY_CONFIG, cost_limit=BUDGET)
        assert new is policy
        assert diagnostics.step_type == 'feasible'

    def test_requires_advantages(self, rng):
        policy = toy_policy(1.0, 0.0)
        batch = TrajectoryBatch(observations=np.ones((2, 1)), actions=np.zeros((2, 1)), log_probs=np.zeros(2),
                                rewards=np.zeros(2), costs=np.zeros(2), episode_lengths=[1, 1])
        with pytest.raises(ContractViolation):
            cpo_update(batch, policy, TOY_CONFIG, cost_limit=BUDGET)

    def test_feasible_step_follows_natural_gradient(self, rng):
        policy = toy_policy(1.0, 0.0)
        batch = toy_batch(policy, antithetic_noise(rng))
        _, grad = policy.surrogate(batch.observations, batch.actions, batch.log_probs, batch.reward_advantages)
        natural = cg_solve(lambda v: policy.fisher_vector_product(batch.observations, v, TOY_CONFIG.damping),
                           grad).x
        new, diagnostics = cpo_update(batch, policy, TOY_CONFIG, cost_limit=BUDGET)
        step = new.params - policy.params
        cosine = step @ natural / (np.linalg.norm(step) * np.linalg.norm(natural))
        assert diagnostics.step_type == 'feasible'
        assert diagnostics.optim_case in (3, 4)
        assert cosine > 0.999
        assert diagnostics.kl <= TOY_CONFIG.max_kl

    def test_recovery_reduces_cost(self, rng):
        eps = antithetic_noise(rng)
        policy = toy_policy(2.0, 1.0)
        offsets = [policy.params[1]]
        for _ in range(5):
            policy, diagnostics = cpo_update(toy_batch(policy, eps), policy, TOY_CONFIG, cost_limit=BUDGET)
            assert diagnostics.step_type == 'recovery'
            assert diagnostics.optim_case == 0
            offsets.append(policy.params[1])
        assert np.all(np.diff(offsets) < 0)

    def test_converges_to_constrained_optimum(self, rng):
        eps = antithetic_noise(rng)
        policy = toy_policy(1.0, 0.0)
        accepted_kl = []
        for _ in range(100):
            policy, diagnostics = cpo_update(toy_batch(policy, eps), policy, TOY_CONFIG, cost_limit=BUDGET)
            if diagnostics.step_type != 'rejected':
                accepted_kl.append(diagnostics.kl)
        w, b = policy.params[:2]
        assert abs(w - 2.0) < 1e-3
        assert abs(b - BUDGET) < 1e-3
        # J_C = b for this bandit
        assert b <= 1.05 * BUDGET
        assert accepted_kl
        assert max(accepted_kl) <= 1.5 * TOY_CONFIG.max_kl

    def test_best_line_search_lands_closer_than_first(self, rng):
        eps = antithetic_noise(rng)
        policy = toy_policy(2.01, BUDGET)
        batch = toy_batch(policy, eps)
        first, _ = cpo_update(batch, policy, TOY_CONFIG.model_copy(update={'line_search': 'first'}),
                              cost_limit=BUDGET)
        best, diagnostics = cpo_update(batch, policy, TOY_CONFIG, cost_limit=BUDGET)
        assert diagnostics.step_fraction < 1.0
        assert abs(best.params[0] - 2.0) < abs(first.params[0] - 2.0)

    def test_zero_costs_with_zero_budget(self, rng):
        policy = toy_policy(1.0, 0.0)
        batch = toy_batch(policy, antithetic_noise(rng))
        batch = replace(batch, costs=np.zeros(batch.n_steps), cost_advantages=np.zeros(batch.n_steps),
                        cost_targets=np.zeros(batch.n_steps))
        new, diagnostics = cpo_update(batch, policy, TOY_CONFIG, cost_limit=0.0)
        assert diagnostics.optim_case == 4
        assert diagnostics.step_type == 'feasible'
        assert np.all(np.isfinite(new.params))
        assert not np.array_equal(new.params, policy.params)


class TestValueFit:
    def test_zero_epochs_keeps_parameters(self, rng):
        value = ValueFunction(MLP([2, 1]), rng.standard_normal(3))
        batch = TrajectoryBatch(observations=rng.standard_normal((4, 2)), actions=np.zeros((4, 1)),
                                log_probs=np.zeros(4), rewards=np.ones(4), costs=np.zeros(4), episode_lengths=[4],
                                reward_targets=np.ones(4), cost_targets=np.zeros(4))
        fitted_r, fitted_c, _ = fit_values(batch, value, value, CpoConfig(value_epochs=0))
        np.testing.assert_array_equal(fitted_r.params, value.params)
        np.testing.assert_array_equal(fitted_c.params, value.params)

    def test_linear_least_squares(self, rng):
        obs = rng.standard_normal((40, 2))
        targets = obs @ np.array([1.5, -0.5]) + 0.25
        value = ValueFunction(MLP([2, 1]), np.zeros(3))
        batch = TrajectoryBatch(observations=obs, actions=np.zeros((40, 1)), log_probs=np.zeros(40),
                                rewards=np.zeros(40), costs=np.zeros(40), episode_lengths=[40],
                                reward_targets=targets, cost_targets=np.full(40, 2.0))
        fitted_r, fitted_c, info = fit_values(batch, value, value, CpoConfig(value_epochs=200))
        np.testing.assert_allclose(fitted_r.params, [1.5, -0.5, 0.25], atol=1e-4)
        np.testing.assert_allclose(fitted_c.predict(obs), np.full(40, 2.0), atol=1e-4)
        assert info['value_reward_loss_after'] <= info['value_reward_loss_before']

    def test_missing_targets(self, rng):
        value = ValueFunction(MLP([1, 1]), np.zeros(2))
        batch = TrajectoryBatch(observations=np.zeros((2, 1)), actions=np.zeros((2, 1)), log_probs=np.zeros(2),
                                rewards=np.zeros(2), costs=np.zeros(2), episode_lengths=[2])
        with pytest.raises(ContractViolation):
            fit_values(batch, value, value, CpoConfig())
