"""
Fault Diagnosis Environment Service

Episodic constrained decision process built from a plant and the passive
fault observer. The reward is the negative expected squared fault-estimation
error under the observer's belief; the cost flags steps where the output
leaves the tracking band around the reference. The agent only ever sees the
masked observation [mu_x | triu(Sx) | mu_z | triu(Sz) | y_ref | y].
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from config import EpisodeConfig
from services.errors import ConfigurationError, ContractViolation
from services.observer_service import Belief, FaultWalkModel, from_triu, observer_step, triu
from services.plant_service import FaultProcess, LinearFaultPlant, PlantState, as_vector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvState:
    plant: PlantState
    belief: Belief
    y: np.ndarray
    y_ref: np.ndarray
    t: int
    horizon: int

    @property
    def done(self) -> bool:
        return self.t >= self.horizon


def observation_size(n_x: int, n_u: int, n_y: int) -> int:
    return n_x + n_x * (n_x + 1) // 2 + n_u + n_u * (n_u + 1) // 2 + 2 * n_y


def pack_observation(belief: Belief, y_ref: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.concatenate([belief.mu_x, triu(belief.sigma_x), belief.mu_z, triu(belief.sigma_z), y_ref, y])


def unpack_observation(obs: np.ndarray, n_x: int, n_u: int, n_y: int) -> Tuple[Belief, np.ndarray, np.ndarray]:
    """Inverse of pack_observation: (belief, y_ref, y)."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (observation_size(n_x, n_u, n_y),):
        raise ContractViolation(f"observation has shape {obs.shape}")
    sizes = [n_x, n_x * (n_x + 1) // 2, n_u, n_u * (n_u + 1) // 2, n_y, n_y]
    parts = np.split(obs, np.cumsum(sizes)[:-1])
    belief = Belief(mu_x=parts[0], sigma_x=from_triu(parts[1], n_x),
                    mu_z=parts[2], sigma_z=from_triu(parts[3], n_u))
    return belief, parts[4], parts[5]


def mask_state(state: EnvState) -> np.ndarray:
    """Agent-visible observation; never contains the true x or z."""
    return pack_observation(state.belief, state.y_ref, state.y)


def reward(belief: Belief, z_true: np.ndarray) -> float:
    """-E||z_true - z||^2 for z ~ N(mu_z, sigma_z), i.e. -trace(Sz) - ||z_true - mu_z||^2."""
    error = np.asarray(z_true, dtype=float) - belief.mu_z
    return float(-np.trace(belief.sigma_z) - error @ error)


def cost(y: np.ndarray, y_ref: np.ndarray, delta_y_max: float) -> float:
    """1 when the infinity-norm tracking error strictly exceeds delta_y_max, else 0."""
    if delta_y_max <= 0:
        raise ContractViolation("delta_y_max must be positive")
    deviation = np.max(np.abs(np.asarray(y, dtype=float) - np.asarray(y_ref, dtype=float)))
    return 1.0 if deviation > delta_y_max else 0.0


def sample_ball(center: np.ndarray, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the Euclidean ball; radius 0 returns `center` exactly."""
    if radius == 0:
        return center.copy()
    direction = rng.standard_normal(center.shape[0])
    direction /= np.linalg.norm(direction)
    return center + radius * rng.uniform() ** (1.0 / center.shape[0]) * direction


class FaultDiagnosisEnv:
    """
    Episodic environment wrapping plant, observer and episode settings.

    Steps are pure in the sense that EnvState is never mutated: every call
    returns a new state, so independent episodes can run side by side.
    """

    def __init__(self, plant: LinearFaultPlant, config: EpisodeConfig,
                 faults: Optional[FaultProcess] = None):
        self.plant = plant
        self.config = config
        self.faults = faults if faults is not None else FaultProcess.from_config(config.fault, plant.n_u)
        try:
            self.walk = FaultWalkModel.from_config(config.walk, plant.n_u)
            self.prior = Belief.from_prior(config.prior, plant.n_x, plant.n_u)
            self.reference = [(step.start, as_vector(step.value, plant.n_y, 'reference.value'))
                              for step in sorted(config.reference, key=lambda s: s.start)]
            self.nominal_gain = None
            if config.action_mode == 'auxiliary':
                if config.nominal_gain is None:
                    raise ConfigurationError("auxiliary action mode needs episode.nominal_gain",
                                             key='episode.nominal_gain')
                self.nominal_gain = np.asarray(config.nominal_gain, dtype=float)
                if self.nominal_gain.shape != (plant.n_u, plant.n_y):
                    raise ConfigurationError(f"nominal_gain must be {plant.n_u}x{plant.n_y}",
                                             key='episode.nominal_gain')
        except ContractViolation as e:
            raise ConfigurationError(f"episode config: {e}", key=e.field) from e

    @property
    def observation_size(self) -> int:
        return observation_size(self.plant.n_x, self.plant.n_u, self.plant.n_y)

    def with_faults(self, faults: FaultProcess) -> 'FaultDiagnosisEnv':
        return FaultDiagnosisEnv(self.plant, self.config, faults)

    def reference_at(self, t: int) -> np.ndarray:
        value = np.zeros(self.plant.n_y)
        for start, step_value in self.reference:
            if t >= start:
                value = step_value
        return value.copy()

    def reset(self, rng: np.random.Generator, horizon: Optional[int] = None) -> Tuple[EnvState, np.ndarray]:
        """
        Start an episode: draw the true fault and initial state, load the prior.

        Args:
            rng: Episode randomness source
            horizon: Episode length; defaults to config.horizon

        Returns:
            (EnvState, initial observation)
        """
        horizon = self.config.horizon if horizon is None else int(horizon)
        if horizon < 1:
            raise ContractViolation("episode horizon must be >= 1")
        z0 = rng.uniform(0.0, 1.0, size=self.plant.n_u)
        dwell_left = self.faults.draw_segment(rng) if self.faults.kind == 'jump' else 0
        x0 = sample_ball(np.zeros(self.plant.n_x), self.config.initial_radius, rng)
        y0 = self.plant.measure(x0, rng)
        state = EnvState(
            plant=PlantState(x=x0, z=z0, dwell_left=dwell_left),
            belief=self.prior,
            y=y0,
            y_ref=self.reference_at(0),
            t=0,
            horizon=horizon,
        )
        return state, mask_state(state)

    def applied_input(self, state: EnvState, action: np.ndarray) -> np.ndarray:
        action = np.asarray(action, dtype=float)
        if self.nominal_gain is not None:
            action = self.nominal_gain @ (state.y_ref - state.y) + action
        return self.plant.clip_action(action)

    def step(self, state: EnvState, action: np.ndarray,
             rng: np.random.Generator) -> Tuple[EnvState, np.ndarray, float, float, bool]:
        """
        Apply an action for one sampling period.

        Returns:
            (next state, observation, reward, cost, done); reward and cost are
            computed from the updated belief and the new output
        """
        if state.done:
            raise ContractViolation("env_step called on a finished episode")
        u = self.applied_input(state, action)
        plant_next, y_next = self.plant.step(state.plant, u, rng, self.faults)
        belief = observer_step(state.belief, u, y_next, self.plant, self.walk)
        next_state = replace(state, plant=plant_next, belief=belief, y=y_next,
                             y_ref=self.reference_at(state.t + 1), t=state.t + 1)
        r = reward(belief, plant_next.z)
        c = cost(y_next, next_state.y_ref, self.config.delta_y_max)
        return next_state, mask_state(next_state), r, c, next_state.done


def reset(env: FaultDiagnosisEnv, rng: np.random.Generator, horizon: Optional[int] = None):
    return env.reset(rng, horizon)


def env_step(env: FaultDiagnosisEnv, state: EnvState, action: np.ndarray, rng: np.random.Generator):
    return env.step(state, action, rng)
