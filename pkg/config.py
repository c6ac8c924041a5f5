import os
from pathlib import Path
from typing import List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from services.errors import ConfigurationError

load_dotenv()

class Config:
    # Logging
    LOG_LEVEL = os.getenv('FIERL_LOG_LEVEL', 'INFO')

    # Default config files
    PLANT_CONFIG = os.getenv('FIERL_PLANT_CONFIG', 'configs/three_tank.json')
    EXPERIMENT_CONFIG = os.getenv('FIERL_EXPERIMENT_CONFIG', 'configs/experiment.json')

    # Outputs
    OUTPUT_DIR = os.getenv('FIERL_OUTPUT_DIR', 'runs')
    DEFAULT_SEED = int(os.getenv('FIERL_SEED', '0'))

    # Numerical settings
    COVARIANCE_JITTER = 1e-12
    PSD_TOLERANCE = 1e-9
    LOG_STD_MIN = -20.0
    LOG_STD_MAX = 2.0

    # File formats
    CSV_SCHEMA_VERSION = 1
    CHECKPOINT_VERSION = 1


Matrix = List[List[float]]
Vector = List[float]


class _Strict(BaseModel):
    model_config = ConfigDict(extra='forbid')


class ThreeTankConfig(_Strict):
    """Physical parameters of the three-tank linearization (SI units)."""
    areas: Vector = Field(default_factory=lambda: [1.0, 1.0, 1.0])
    # effective outflow coefficients of the pipes 1->3, 3->2 and 2->out
    valve_coefficients: Vector = Field(default_factory=lambda: [0.05, 0.05, 0.05])
    levels: Vector = Field(default_factory=lambda: [0.489, 0.2332, 0.3611])
    gravity: float = 9.81

    @model_validator(mode='after')
    def _check_sizes(self):
        for name in ('areas', 'valve_coefficients', 'levels'):
            if len(getattr(self, name)) != 3:
                raise ValueError(f"{name} must have 3 entries")
        if min(self.areas) <= 0:
            raise ValueError("areas must be positive")
        return self


class PlantConfig(_Strict):
    A: Optional[Matrix] = None
    B: Optional[Matrix] = None
    C: Optional[Matrix] = None
    three_tank: Optional[ThreeTankConfig] = None
    sigma_w: Union[float, Matrix] = 1e-8
    sigma_v: Union[float, Matrix] = 1e-6
    mu_w: Optional[Vector] = None
    mu_v: Optional[Vector] = None
    u_min: Union[float, Vector] = -0.002
    u_max: Union[float, Vector] = 0.02
    t_s: float = Field(default=0.1, gt=0)
    discretization: Literal['euler', 'exact'] = 'euler'

    @model_validator(mode='after')
    def _check_source(self):
        explicit = self.A is not None and self.B is not None
        if not explicit and self.three_tank is None:
            raise ValueError("either A and B or three_tank must be given")
        return self


class FaultProcessConfig(_Strict):
    kind: Literal['constant', 'random-walk', 'jump'] = 'constant'
    walk_mean: Union[float, Vector] = 0.0
    walk_covariance: Union[float, Matrix] = 0.0
    dwell: int = Field(default=30, ge=1)
    max_dwell: Optional[int] = None

    @model_validator(mode='after')
    def _check_dwell(self):
        if self.max_dwell is not None and self.max_dwell < self.dwell:
            raise ValueError("max_dwell must be >= dwell")
        return self


class FaultWalkConfig(_Strict):
    """Random-walk fault model assumed by the observer."""
    mu_xi: Union[float, Vector] = 0.0
    sigma_xi: Union[float, Matrix] = 1e-3


class PriorConfig(_Strict):
    mu_x: Union[float, Vector] = 0.0
    sigma_x: Union[float, Matrix] = 1e-4
    mu_z: Union[float, Vector] = 0.5
    sigma_z: Union[float, Matrix] = 1.0


class ReferenceStep(_Strict):
    start: int = Field(ge=0)
    value: Vector


class EpisodeConfig(_Strict):
    horizon: int = Field(default=40, ge=1)
    delta_y_max: float = Field(default=0.1, gt=0)
    cost_limit: float = Field(default=6.0, ge=0)
    gamma: float = Field(default=0.99, gt=0, le=1)
    gamma_c: float = Field(default=1.0, gt=0, le=1)
    initial_radius: float = Field(default=0.1, ge=0)
    fault: FaultProcessConfig = Field(default_factory=FaultProcessConfig)
    walk: FaultWalkConfig = Field(default_factory=FaultWalkConfig)
    prior: PriorConfig = Field(default_factory=PriorConfig)
    reference: List[ReferenceStep] = Field(default_factory=list)
    action_mode: Literal['integrated', 'auxiliary'] = 'integrated'
    nominal_gain: Optional[Matrix] = None


class PolicyConfig(_Strict):
    hidden_sizes: List[int] = Field(default_factory=lambda: [64, 64])
    activation: Literal['tanh'] = 'tanh'
    init_std_fraction: float = Field(default=0.01, gt=0)
    output_scale: float = Field(default=0.01, gt=0)
    learn_log_std: bool = True
    normalize_observations: bool = True


class CpoConfig(_Strict):
    max_kl: float = Field(default=0.01, gt=0)
    gae_lambda: float = Field(default=0.95, ge=0, le=1)
    cg_iterations: int = Field(default=10, ge=1)
    cg_tolerance: float = Field(default=1e-8, gt=0)
    damping: float = Field(default=0.1, ge=0)
    backtrack_factor: float = Field(default=0.8, gt=0, lt=1)
    backtrack_steps: int = Field(default=10, ge=1)
    cost_slack: float = Field(default=0.0, ge=0)
    line_search: Literal['first', 'best'] = 'first'
    value_epochs: int = Field(default=40, ge=0)
    value_l2: float = Field(default=0.0, ge=0)


class BaselineConfig(_Strict):
    nominal_gain: Matrix = Field(default_factory=lambda: [[1.0, 0.0], [0.0, 1.0]])
    gain_scales: List[float] = Field(default_factory=lambda: [0.05, 0.1, 0.2, 0.5])
    perturbations: List[float] = Field(default_factory=lambda: [0.0, 0.002, 0.005, 0.01, 0.02])
    episodes: int = Field(default=200, ge=1)
    tie_tolerance: float = Field(default=1e-6, ge=0)


class TrainingConfig(_Strict):
    updates: int = Field(default=1000, ge=1)
    episodes_per_update: int = Field(default=90, ge=1)
    checkpoint_every: int = Field(default=50, ge=1)


class EvaluationConfig(_Strict):
    episodes: int = Field(default=10000, ge=0)
    horizon_range: List[int] = Field(default_factory=lambda: [90, 180])
    dwell: int = Field(default=30, ge=1)
    max_dwell: Optional[int] = None
    deterministic: bool = True
    recovery_window: int = Field(default=30, ge=1)

    @model_validator(mode='after')
    def _check_range(self):
        if len(self.horizon_range) != 2 or self.horizon_range[0] < 1 \
                or self.horizon_range[1] < self.horizon_range[0]:
            raise ValueError("horizon_range must be [low, high] with 1 <= low <= high")
        return self


class SweepConfig(_Strict):
    thresholds: List[float] = Field(default_factory=lambda: [0.02, 0.05, 0.1, 0.2])
    updates: int = Field(default=200, ge=1)
    episodes_per_update: int = Field(default=30, ge=1)
    evaluation_episodes: int = Field(default=1000, ge=0)
    drift_rollouts: int = Field(default=10000, ge=1)


class ExperimentConfig(_Strict):
    plant_config: str = 'three_tank.json'
    plant: Optional[PlantConfig] = None
    episode: EpisodeConfig = Field(default_factory=EpisodeConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    cpo: CpoConfig = Field(default_factory=CpoConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    seed: int = Config.DEFAULT_SEED
    output_dir: str = Config.OUTPUT_DIR


def _first_error_key(error: ValidationError) -> str:
    details = error.errors()
    if not details:
        return '<root>'
    loc = [str(part) for part in details[0].get('loc', ())]
    return '.'.join(loc) or '<root>'


def parse_model(model_cls, data, source: str = '<memory>'):
    """
    Validate a mapping against a config model.

    Raises:
        ConfigurationError: naming the first offending key
    """
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        key = _first_error_key(e)
        message = e.errors()[0].get('msg', str(e))
        raise ConfigurationError(f"{source}: invalid value for '{key}': {message}", key=key) from e


def _load_json(model_cls, path: Union[str, Path]):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e}", key=str(path)) from e
    try:
        return model_cls.model_validate_json(text)
    except ValidationError as e:
        key = _first_error_key(e)
        message = e.errors()[0].get('msg', str(e))
        raise ConfigurationError(f"{path}: invalid value for '{key}': {message}", key=key) from e


def load_plant_config(path: Union[str, Path, None] = None) -> PlantConfig:
    return _load_json(PlantConfig, path or Config.PLANT_CONFIG)


def load_experiment_config(path: Union[str, Path, None] = None) -> ExperimentConfig:
    """
    Load an experiment file and resolve its plant reference.

    The plant file path is taken relative to the experiment file unless an
    inline `plant` section is present.
    """
    path = Path(path or Config.EXPERIMENT_CONFIG)
    experiment = _load_json(ExperimentConfig, path)
    if experiment.plant is None:
        plant_path = Path(experiment.plant_config)
        if not plant_path.is_absolute():
            plant_path = path.parent / plant_path
        experiment = experiment.model_copy(update={'plant': load_plant_config(plant_path)})
    return experiment
