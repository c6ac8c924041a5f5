"""
Baseline Controller Service

Proportional output feedback with a uniform random perturbation on the input,
and the grid search that tunes its gain scale and perturbation size for the
best diagnosis reward within the tracking-cost budget.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import BaselineConfig
from services.env_service import FaultDiagnosisEnv
from services.errors import ConfigurationError, ContractViolation
from services.plant_service import FaultPlant
from services.trace_service import FLOAT_FORMAT, episode_rngs, run_episode

logger = logging.getLogger(__name__)

TUNING_STREAM = 3


@dataclass(frozen=True)
class BaselineSpec:
    gain: np.ndarray
    perturbation: float
    gain_scale: float = 1.0

    def __post_init__(self):
        if self.perturbation < 0:
            raise ContractViolation("perturbation magnitude K_p must be >= 0", field='perturbation')
        if np.asarray(self.gain).ndim != 2:
            raise ContractViolation("gain must be a matrix (n_u x n_y)", field='gain')

    def to_dict(self) -> dict:
        return {'gain': np.asarray(self.gain).tolist(), 'perturbation': self.perturbation,
                'gain_scale': self.gain_scale}

    @classmethod
    def from_dict(cls, data: dict) -> 'BaselineSpec':
        return cls(gain=np.asarray(data['gain'], dtype=float), perturbation=float(data['perturbation']),
                   gain_scale=float(data.get('gain_scale', 1.0)))


def baseline_action(spec: BaselineSpec, y: np.ndarray, y_ref: np.ndarray, rng: np.random.Generator,
                    plant: FaultPlant) -> np.ndarray:
    """u = clip(K (y_ref - y) + du), du ~ U[-K_p, K_p]^{n_u}."""
    feedback = np.asarray(spec.gain) @ (np.asarray(y_ref, dtype=float) - np.asarray(y, dtype=float))
    noise = rng.uniform(-spec.perturbation, spec.perturbation, size=feedback.shape[0])
    return plant.clip_action(feedback + noise)


class BaselineController:
    """Controller wrapper reading y_ref and y from the tail of the masked observation."""

    def __init__(self, spec: BaselineSpec, plant: FaultPlant):
        gain = np.asarray(spec.gain)
        if gain.shape != (plant.n_u, plant.n_y):
            raise ConfigurationError(f"baseline gain must be {plant.n_u}x{plant.n_y}, got {gain.shape}",
                                     key='baseline.nominal_gain')
        self.spec = spec
        self.plant = plant

    def __call__(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n_y = self.plant.n_y
        y_ref, y = obs[-2 * n_y:-n_y], obs[-n_y:]
        return baseline_action(self.spec, y, y_ref, rng, self.plant)


def evaluate_spec(env: FaultDiagnosisEnv, spec: BaselineSpec, episodes: int, seed: int,
                  stream: int = TUNING_STREAM) -> Dict[str, float]:
    """Mean per-step reward and mean per-episode cost return over seeded episodes."""
    controller = BaselineController(spec, env.plant)
    step_rewards, episode_costs = [], []
    for i in range(episodes):
        env_rng, actor_rng = episode_rngs(seed, stream, i)
        trace = run_episode(env, controller, env_rng, actor_rng)
        step_rewards.append(float(np.mean(trace.rewards)))
        episode_costs.append(float(np.sum(trace.costs)))
    return {'mean_step_reward': float(np.mean(step_rewards)),
            'mean_episode_cost': float(np.mean(episode_costs))}


def select_baseline(rewards: Sequence[float], costs: Sequence[float], cost_limit: float,
                    tie_tolerance: float = 1e-6) -> Tuple[int, bool]:
    """
    Pick the grid point to keep.

    Among points with cost <= cost_limit take the highest reward; rewards
    within `tie_tolerance` of the best count as equal and the lower cost
    wins. With no feasible point the minimum-cost point is returned.

    Returns:
        (index, feasible)
    """
    if len(rewards) == 0 or len(rewards) != len(costs):
        raise ContractViolation("grid must be non-empty with one cost per reward", field='grid')
    rewards = np.asarray(rewards, dtype=float)
    costs = np.asarray(costs, dtype=float)
    feasible = np.flatnonzero(costs <= cost_limit)
    if feasible.size == 0:
        return int(np.argmin(costs)), False
    best = rewards[feasible].max()
    tied = feasible[rewards[feasible] >= best - tie_tolerance]
    return int(tied[np.argmin(costs[tied])]), True


@dataclass
class TuningResult:
    spec: BaselineSpec
    feasible: bool
    report: pd.DataFrame


def tune_baseline(env: FaultDiagnosisEnv, config: BaselineConfig, cost_limit: float, seed: int,
                  gain_scales: Optional[List[float]] = None,
                  perturbations: Optional[List[float]] = None) -> TuningResult:
    """
    Grid search over K = k * K0 and K_p on the environment's episode distribution.

    Every grid point sees the same episode seeds.

    Returns:
        TuningResult with the selected spec, its feasibility and the full grid report
    """
    gain_scales = config.gain_scales if gain_scales is None else gain_scales
    perturbations = config.perturbations if perturbations is None else perturbations
    if not gain_scales or not perturbations:
        raise ContractViolation("baseline grid is empty", field='baseline.gain_scales')
    nominal = np.asarray(config.nominal_gain, dtype=float)

    rows, specs = [], []
    for k in gain_scales:
        for k_p in perturbations:
            spec = BaselineSpec(gain=k * nominal, perturbation=float(k_p), gain_scale=float(k))
            metrics = evaluate_spec(env, spec, config.episodes, seed)
            logger.info(f"Baseline k={k}, K_p={k_p}: reward/step={metrics['mean_step_reward']:.5f}, "
                        f"cost/episode={metrics['mean_episode_cost']:.3f}")
            specs.append(spec)
            rows.append({'gain_scale': float(k), 'perturbation': float(k_p), **metrics})

    report = pd.DataFrame(rows)
    index, feasible = select_baseline(report['mean_step_reward'].tolist(), report['mean_episode_cost'].tolist(),
                                      cost_limit, config.tie_tolerance)
    report['feasible'] = report['mean_episode_cost'] <= cost_limit
    report['selected'] = [i == index for i in range(len(report))]
    if not feasible:
        logger.warning(f"No baseline grid point meets the cost budget {cost_limit}; using the minimum-cost point")
    return TuningResult(spec=specs[index], feasible=feasible, report=report)


def write_tuning_report(report: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    return path


def save_baseline_spec(path: Union[str, Path], spec: BaselineSpec, feasible: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {**spec.to_dict(), 'feasible': feasible}
    path.write_text(json.dumps(payload, sort_keys=True, indent=1))
    return path


def load_baseline_spec(path: Union[str, Path]) -> BaselineSpec:
    path = Path(path)
    try:
        return BaselineSpec.from_dict(json.loads(path.read_text()))
    except (OSError, ValueError, KeyError) as e:
        raise ConfigurationError(f"cannot load baseline spec {path}: {e}", key='baseline') from e
