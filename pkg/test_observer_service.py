"""
Observer tests: closed-form pieces, Monte-Carlo and particle-filter oracles,
and the reduction to a textbook Kalman filter.
"""

import numpy as np
import pandas as pd
import pytest

from config import PriorConfig
from services.errors import ContractViolation, NumericalError
from services.observer_service import (Belief, FaultWalkModel, PredictedState, belief_frame, correct_state,
                                       correct_state_information, from_triu, observer_step, predict,
                                       propagate_fault, symmetrize, triu, update_fault)
from services.plant_service import LinearFaultPlant, PlantState


def random_spd(rng, n, scale=1.0):
    m = rng.standard_normal((n, n))
    return scale * (m @ m.T + n * np.eye(n)) / n


def two_state_plant(sigma=1e-6):
    return LinearFaultPlant(
        A=0.9 * np.eye(2), B=np.eye(2), C=np.eye(2),
        sigma_w=sigma * np.eye(2), sigma_v=sigma * np.eye(2),
        u_min=-np.ones(2), u_max=np.ones(2),
    )


def kalman_reference(A, B, C, sigma_w, sigma_v, mu, P, inputs, outputs):
    """Textbook Kalman filter with known input B u."""
    means = []
    for u, y in zip(inputs, outputs):
        mu = A @ mu + B @ u
        P = A @ P @ A.T + sigma_w
        S = C @ P @ C.T + sigma_v
        K = np.linalg.solve(S, C @ P).T
        mu = mu + K @ (y - C @ mu)
        P = (np.eye(len(mu)) - K @ C) @ P
        means.append(mu)
    return np.array(means)


class TestPredict:
    def test_zero_input_ignores_fault_uncertainty(self, rng):
        A = np.array([[0.9, 0.1], [0.0, 0.8]])
        belief = Belief(mu_x=np.ones(2), sigma_x=random_spd(rng, 2), mu_z=np.array([0.3, 0.6]),
                        sigma_z=random_spd(rng, 2))
        sigma_w = 1e-3 * np.eye(2)
        pred = predict(belief, np.zeros(2), A, np.eye(2), sigma_w)
        np.testing.assert_allclose(pred.sigma_x_pred, A @ belief.sigma_x @ A.T + sigma_w)
        assert not np.any(pred.b_star)

    def test_known_fault_is_kalman_predict(self, rng):
        A = np.array([[0.9, 0.1], [0.0, 0.8]])
        B = np.array([[1.0, 0.0], [0.5, 1.0]])
        sigma_x = random_spd(rng, 2)
        belief = Belief(mu_x=np.array([0.2, -0.1]), sigma_x=sigma_x, mu_z=np.ones(2), sigma_z=np.zeros((2, 2)))
        u = np.array([0.3, -0.2])
        pred = predict(belief, u, A, B, 1e-4 * np.eye(2))
        np.testing.assert_allclose(pred.mu_x_pred, A @ belief.mu_x + B @ u)
        np.testing.assert_allclose(pred.sigma_x_pred, A @ sigma_x @ A.T + 1e-4 * np.eye(2))

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(2024)
        n = 1_000_000
        A = np.array([[0.95, 0.1], [-0.05, 0.9]])
        B = np.array([[1.0, 0.2], [0.0, 0.7]])
        u = np.array([0.8, -0.5])
        belief = Belief(mu_x=np.array([0.1, -0.3]), sigma_x=random_spd(rng, 2, 0.1),
                        mu_z=np.array([0.6, 0.4]), sigma_z=random_spd(rng, 2, 0.05))
        sigma_w = 0.01 * np.eye(2)
        pred = predict(belief, u, A, B, sigma_w)

        x = rng.multivariate_normal(belief.mu_x, belief.sigma_x, size=n)
        z = rng.multivariate_normal(belief.mu_z, belief.sigma_z, size=n)
        w = rng.multivariate_normal(np.zeros(2), sigma_w, size=n)
        samples = x @ A.T + (z * u) @ B.T + w

        std_err = samples.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(samples.mean(axis=0) - pred.mu_x_pred) < 4 * std_err)
        np.testing.assert_allclose(np.cov(samples.T), pred.sigma_x_pred, rtol=1e-2, atol=1e-4)

    def test_rejects_non_psd_belief(self):
        belief = Belief(mu_x=np.zeros(1), sigma_x=np.array([[-1.0]]), mu_z=np.zeros(1), sigma_z=np.eye(1))
        with pytest.raises(ContractViolation):
            predict(belief, np.ones(1), np.eye(1), np.eye(1), np.eye(1))


class TestCorrectState:
    def _pred(self, rng, n=2):
        return PredictedState(mu_x_pred=rng.standard_normal(n), sigma_x_pred=random_spd(rng, n),
                              b_star=np.eye(n))

    def test_uninformative_measurement_keeps_prior(self, rng):
        pred = self._pred(rng)
        mu, sigma = correct_state(pred, np.array([5.0, -5.0]), np.eye(2), 1e12 * np.eye(2))
        np.testing.assert_allclose(mu, pred.mu_x_pred, atol=1e-9)
        np.testing.assert_allclose(sigma, pred.sigma_x_pred, atol=1e-9)

    def test_perfect_measurement_returns_output(self, rng):
        pred = self._pred(rng)
        y = np.array([0.4, -0.7])
        mu, _ = correct_state(pred, y, np.eye(2), 1e-14 * np.eye(2))
        np.testing.assert_allclose(mu, y, atol=1e-10)

    def test_woodbury_equals_information_form(self, rng):
        for n in (1, 3):
            pred = self._pred(rng, n)
            C = rng.standard_normal((n, n)) + 2 * np.eye(n)
            sigma_v = random_spd(rng, n, 0.5)
            y = rng.standard_normal(n)
            mu_w, sigma_wd = correct_state(pred, y, C, sigma_v)
            mu_i, sigma_i = correct_state_information(pred, y, C, sigma_v)
            np.testing.assert_allclose(mu_w, mu_i, rtol=1e-8)
            np.testing.assert_allclose(sigma_wd, sigma_i, rtol=1e-8)

    def test_posterior_covariance_not_larger(self, rng):
        pred = self._pred(rng, 3)
        _, sigma = correct_state(pred, np.zeros(3), np.eye(3)[:2], 0.1 * np.eye(2))
        assert np.linalg.eigvalsh(pred.sigma_x_pred - sigma).min() > -1e-12

    def test_singular_innovation_reports_condition(self):
        pred = PredictedState(mu_x_pred=np.zeros(2), sigma_x_pred=np.zeros((2, 2)), b_star=np.eye(2))
        with pytest.raises(NumericalError) as info:
            correct_state(pred, np.zeros(2), np.eye(2), np.zeros((2, 2)))
        assert 'condition_number' in info.value.diagnostics


class TestFaultUpdate:
    def test_zero_input_leaves_fault_unchanged(self, rng):
        belief = Belief(mu_x=np.zeros(2), sigma_x=np.eye(2), mu_z=np.array([0.5, 0.5]), sigma_z=np.eye(2))
        pred = predict(belief, np.zeros(2), np.eye(2), np.eye(2), np.eye(2))
        mu_z, sigma_z = update_fault(belief, pred, np.array([1.0, 2.0]), 0.5 * np.eye(2))
        np.testing.assert_array_equal(mu_z, belief.mu_z)
        np.testing.assert_array_equal(sigma_z, belief.sigma_z)

    def test_zero_innovation_shrinks_covariance_only(self, rng):
        belief = Belief(mu_x=np.zeros(2), sigma_x=0.1 * np.eye(2), mu_z=np.array([0.5, 0.5]), sigma_z=np.eye(2))
        pred = predict(belief, np.array([0.5, 0.3]), np.eye(2), np.eye(2), 0.01 * np.eye(2))
        mu_z, sigma_z = update_fault(belief, pred, pred.mu_x_pred, 0.05 * np.eye(2))
        np.testing.assert_allclose(mu_z, belief.mu_z)
        assert np.linalg.eigvalsh(belief.sigma_z - sigma_z).min() > 0

    def test_propagation(self):
        walk = FaultWalkModel(mu_xi=np.zeros(2), sigma_xi=1e-3 * np.eye(2))
        mu, sigma = np.array([0.2, 0.9]), np.diag([0.5, 0.1])
        for k in range(1, 6):
            mu, sigma = propagate_fault(mu, sigma, walk)
            np.testing.assert_allclose(sigma, np.diag([0.5, 0.1]) + k * 1e-3 * np.eye(2))
        np.testing.assert_array_equal(mu, [0.2, 0.9])

        still = FaultWalkModel(mu_xi=np.zeros(2), sigma_xi=np.zeros((2, 2)))
        mu2, sigma2 = propagate_fault(mu, sigma, still)
        np.testing.assert_array_equal(mu2, mu)
        np.testing.assert_array_equal(sigma2, sigma)


class TestObserverStep:
    def test_kalman_reduction(self):
        rng = np.random.default_rng(7)
        plant = LinearFaultPlant(
            A=np.array([[0.9, 0.2], [-0.1, 0.8]]), B=np.array([[1.0, 0.0], [0.3, 1.0]]),
            C=np.array([[1.0, 0.5]]), sigma_w=0.01 * np.eye(2), sigma_v=np.array([[0.02]]),
            u_min=-np.ones(2), u_max=np.ones(2),
        )
        z = np.array([0.8, 0.4])
        walk = FaultWalkModel(mu_xi=np.zeros(2), sigma_xi=np.zeros((2, 2)))
        belief = Belief(mu_x=np.zeros(2), sigma_x=0.1 * np.eye(2), mu_z=z.copy(), sigma_z=np.zeros((2, 2)))

        state = PlantState(x=rng.multivariate_normal(np.zeros(2), 0.1 * np.eye(2)), z=z)
        inputs, outputs, means = [], [], []
        for _ in range(100):
            u = rng.uniform(-1, 1, size=2)
            state, y = plant.step(state, u, rng)
            belief = observer_step(belief, u, y, plant, walk, jitter=0.0)
            inputs.append(z * u)
            outputs.append(y)
            means.append(belief.mu_x)

        reference = kalman_reference(plant.A, plant.B, plant.C, plant.sigma_w, plant.sigma_v,
                                     np.zeros(2), 0.1 * np.eye(2), inputs, outputs)
        np.testing.assert_allclose(np.array(means), reference, rtol=1e-10, atol=1e-12)

    def test_zero_input_keeps_fault_mean(self, three_tank, rng):
        walk = FaultWalkModel(mu_xi=np.zeros(2), sigma_xi=1e-3 * np.eye(2))
        belief = Belief.from_prior(PriorConfig(), 3, 2)
        state = PlantState(x=np.zeros(3), z=np.array([0.3, 0.9]))
        for _ in range(40):
            state, y = three_tank.step(state, np.zeros(2), rng)
            belief = observer_step(belief, np.zeros(2), y, three_tank, walk)
        np.testing.assert_array_equal(belief.mu_z, [0.5, 0.5])

    def test_fault_free_plant_converges(self):
        rng = np.random.default_rng(11)
        plant = two_state_plant()
        walk = FaultWalkModel(mu_xi=np.zeros(2), sigma_xi=1e-3 * np.eye(2))
        belief = Belief(mu_x=np.zeros(2), sigma_x=1e-6 * np.eye(2), mu_z=np.array([0.5, 0.5]), sigma_z=np.eye(2))
        state = PlantState(x=np.zeros(2), z=np.ones(2))
        for t in range(40):
            u = 0.5 * np.array([(-1) ** t, (-1) ** (t // 2)])
            state, y = plant.step(state, u, rng)
            belief = observer_step(belief, u, y, plant, walk)
        assert np.max(np.abs(belief.mu_z - 1.0)) < 0.1

    def test_covariances_exactly_symmetric(self, three_tank, rng):
        walk = FaultWalkModel(mu_xi=np.zeros(2), sigma_xi=1e-3 * np.eye(2))
        belief = Belief.from_prior(PriorConfig(), 3, 2)
        state = PlantState(x=np.zeros(3), z=np.array([0.6, 0.2]))
        for _ in range(30):
            u = rng.uniform(-0.002, 0.02, size=2)
            state, y = three_tank.step(state, u, rng)
            new = observer_step(belief, u, y, three_tank, walk)
            np.testing.assert_array_equal(new.sigma_x, new.sigma_x.T)
            np.testing.assert_array_equal(new.sigma_z, new.sigma_z.T)
            belief = new

    def test_tracks_particle_filter(self):
        """
        1-D plant, constant true fault, alternating excitation. A bootstrap
        particle filter on (x, z) under the same assumed random walk is the
        reference posterior.
        """
        rng = np.random.default_rng(99)
        a, b, sigma_w, sigma_v, sigma_xi = 0.9, 1.0, 1e-3, 1e-5, 1e-4
        plant = LinearFaultPlant(A=np.array([[a]]), B=np.array([[b]]), C=np.array([[1.0]]),
                                 sigma_w=np.array([[sigma_w]]), sigma_v=np.array([[sigma_v]]),
                                 u_min=np.array([-1.0]), u_max=np.array([1.0]))
        walk = FaultWalkModel(mu_xi=np.zeros(1), sigma_xi=np.array([[sigma_xi]]))
        belief = Belief(mu_x=np.zeros(1), sigma_x=np.array([[1e-4]]), mu_z=np.array([0.5]), sigma_z=np.eye(1))
        state = PlantState(x=rng.normal(0.0, 1e-2, size=1), z=np.array([0.7]))

        n = 100_000
        px = rng.normal(0.0, 1e-2, size=n)
        pz = rng.normal(0.5, 1.0, size=n)
        filter_means, filter_vars, pf_means, pf_vars = [], [], [], []
        for t in range(50):
            u = np.array([0.5 if t % 2 == 0 else -0.5])
            state, y = plant.step(state, u, rng)
            belief = observer_step(belief, u, y, plant, walk)

            px = a * px + b * pz * u[0] + rng.normal(0.0, np.sqrt(sigma_w), size=n)
            log_w = -0.5 * (y[0] - px) ** 2 / sigma_v
            weights = np.exp(log_w - log_w.max())
            weights /= weights.sum()
            positions = (rng.uniform() + np.arange(n)) / n
            idx = np.minimum(np.searchsorted(np.cumsum(weights), positions), n - 1)
            px, pz = px[idx], pz[idx] + rng.normal(0.0, np.sqrt(sigma_xi), size=n)

            filter_means.append(belief.mu_z[0])
            filter_vars.append(belief.sigma_z[0, 0])
            pf_means.append(pz.mean())
            pf_vars.append(pz.var())

        filter_means, pf_means = np.array(filter_means), np.array(pf_means)
        ratio = np.array(filter_vars) / np.array(pf_vars)
        assert np.mean(np.abs(filter_means - pf_means)) < 0.05
        assert np.all((ratio[5:] > 0.5) & (ratio[5:] < 2.0))


class TestPacking:
    def test_triu_round_trip(self, rng):
        m = symmetrize(rng.standard_normal((3, 3)))
        packed = triu(m)
        assert packed.shape == (6,)
        np.testing.assert_array_equal(from_triu(packed, 3), m)

    def test_from_triu_rejects_wrong_length(self):
        with pytest.raises(ContractViolation):
            from_triu(np.zeros(5), 3)

    def test_belief_frame_columns(self):
        beliefs = [Belief.from_prior(PriorConfig(), 3, 2)] * 4
        frame = belief_frame(beliefs)
        assert isinstance(frame, pd.DataFrame)
        assert len(frame) == 4
        assert {'t', 'mu_x_0', 'sigma_x_02', 'mu_z_1', 'sigma_z_11'} <= set(frame.columns)
        assert frame['sigma_z_00'].iloc[0] == 1.0
