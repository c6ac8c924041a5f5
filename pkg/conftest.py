import numpy as np
import pytest

from config import EpisodeConfig, ExperimentConfig, PlantConfig
from services.plant_service import LinearFaultPlant, plant_from_config


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def three_tank():
    return plant_from_config(PlantConfig(three_tank={}))


@pytest.fixture
def scalar_plant():
    """1-D plant x' = 0.9 x + z u + w, y = x + v."""
    return LinearFaultPlant(
        A=np.array([[0.9]]), B=np.array([[1.0]]), C=np.array([[1.0]]),
        sigma_w=np.array([[1e-3]]), sigma_v=np.array([[1e-4]]),
        u_min=np.array([-1.0]), u_max=np.array([1.0]),
    )


@pytest.fixture
def smoke_config(tmp_path):
    """Smallest experiment that still exercises every stage."""
    return ExperimentConfig.model_validate({
        'plant': PlantConfig(three_tank={}).model_dump(),
        'episode': EpisodeConfig(horizon=5).model_dump(),
        'policy': {'hidden_sizes': [8]},
        'cpo': {'value_epochs': 5},
        'baseline': {'gain_scales': [0.1], 'perturbations': [0.0, 0.005], 'episodes': 2},
        'training': {'updates': 1, 'episodes_per_update': 2, 'checkpoint_every': 1},
        'evaluation': {'episodes': 2, 'horizon_range': [35, 40], 'dwell': 10},
        'sweep': {'thresholds': [0.05, 1000.0], 'updates': 1, 'episodes_per_update': 2,
                  'evaluation_episodes': 2, 'drift_rollouts': 100},
        'seed': 7,
        'output_dir': str(tmp_path / 'runs'),
    })
