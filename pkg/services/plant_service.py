"""
Plant Simulation Service

Ground-truth simulation of discrete-time linear systems whose actuators suffer
multiplicative loss-of-effectiveness faults, plus the three-tank benchmark
instance used by the training and evaluation protocols.

    x_{t+1} = A x_t + B diag(z_t) u_t + w_t,   w_t ~ N(mu_w, sigma_w)
    y_{t+1} = C x_{t+1} + v_{t+1},             v_t ~ N(mu_v, sigma_v)

States are deviation coordinates around the linearization point.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.linalg import expm

from config import Config, FaultProcessConfig, PlantConfig, load_plant_config
from services.errors import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)


def as_vector(value, size: int, name: str = 'vector') -> np.ndarray:
    """Broadcast a scalar or list to a float vector of length `size`."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(size, float(arr))
    arr = arr.reshape(-1)
    if arr.shape[0] != size:
        raise ContractViolation(f"{name} has length {arr.shape[0]}, expected {size}", field=name)
    return arr.copy()


def as_matrix(value, size: int, name: str = 'matrix') -> np.ndarray:
    """Scalars are read as isotropic covariances: value * I."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(size)
    if arr.shape != (size, size):
        raise ContractViolation(f"{name} has shape {arr.shape}, expected {(size, size)}", field=name)
    return arr.copy()


def check_psd(matrix: np.ndarray, name: str, tol: float = Config.PSD_TOLERANCE) -> None:
    if not np.all(np.isfinite(matrix)):
        raise ContractViolation(f"{name} has non-finite entries", field=name)
    if not np.allclose(matrix, matrix.T, atol=tol, rtol=0.0):
        raise ContractViolation(f"{name} is not symmetric", field=name)
    scale = max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0
    if matrix.size and np.linalg.eigvalsh(matrix).min() < -tol * scale:
        raise ContractViolation(f"{name} is not positive semi-definite", field=name)


def noise_factor(cov: np.ndarray) -> np.ndarray:
    """Square-root factor L with L L^T = cov; works for singular covariances."""
    eigval, eigvec = np.linalg.eigh(0.5 * (cov + cov.T))
    return eigvec * np.sqrt(np.clip(eigval, 0.0, None))


@dataclass(frozen=True)
class PlantState:
    """True plant state: x in deviation coordinates, z in [0,1]^{n_u} (1 = healthy)."""
    x: np.ndarray
    z: np.ndarray
    # steps left in the current fault segment (jump process only)
    dwell_left: int = 0


@dataclass(frozen=True)
class FaultProcess:
    """Evolution law of the true fault vector; independent of x and u."""
    kind: str = 'constant'
    walk_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    walk_covariance: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    dwell: int = 30
    max_dwell: int = 60

    def __post_init__(self):
        if self.kind not in ('constant', 'random-walk', 'jump'):
            raise ContractViolation(f"unknown fault process kind '{self.kind}'", field='kind')
        if self.dwell < 1 or self.max_dwell < self.dwell:
            raise ContractViolation("fault dwell must satisfy 1 <= dwell <= max_dwell", field='dwell')
        if self.walk_covariance.size:
            check_psd(self.walk_covariance, 'walk_covariance')

    @classmethod
    def from_config(cls, cfg: FaultProcessConfig, n_u: int) -> 'FaultProcess':
        return cls(
            kind=cfg.kind,
            walk_mean=as_vector(cfg.walk_mean, n_u, 'walk_mean'),
            walk_covariance=as_matrix(cfg.walk_covariance, n_u, 'walk_covariance'),
            dwell=cfg.dwell,
            max_dwell=cfg.max_dwell if cfg.max_dwell is not None else 2 * cfg.dwell,
        )

    def draw_segment(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.dwell, self.max_dwell + 1))

    def advance(self, z: np.ndarray, dwell_left: int, rng: np.random.Generator) -> Tuple[np.ndarray, int]:
        if self.kind == 'constant':
            return z, dwell_left
        if self.kind == 'random-walk':
            xi = self.walk_mean + noise_factor(self.walk_covariance) @ rng.standard_normal(z.shape[0])
            return np.clip(z + xi, 0.0, 1.0), dwell_left
        dwell_left -= 1
        if dwell_left <= 0:
            return rng.uniform(0.0, 1.0, size=z.shape[0]), self.draw_segment(rng)
        return z, dwell_left


CONSTANT_FAULTS = FaultProcess()


class FaultPlant(ABC):
    """A simulated plant whose actuators may be faulty."""

    @property
    @abstractmethod
    def n_x(self) -> int: ...

    @property
    @abstractmethod
    def n_u(self) -> int: ...

    @property
    @abstractmethod
    def n_y(self) -> int: ...

    @abstractmethod
    def step(self, state: PlantState, u: np.ndarray, rng: np.random.Generator,
             faults: FaultProcess = CONSTANT_FAULTS) -> Tuple[PlantState, np.ndarray]: ...

    @abstractmethod
    def measure(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    @abstractmethod
    def clip_action(self, u: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class LinearFaultPlant(FaultPlant):
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    sigma_w: np.ndarray
    sigma_v: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    t_s: float = 0.1
    mu_w: Optional[np.ndarray] = None
    mu_v: Optional[np.ndarray] = None

    def __post_init__(self):
        n_x = self.A.shape[0]
        if self.A.shape != (n_x, n_x):
            raise ContractViolation(f"A must be square, got {self.A.shape}", field='A')
        if self.B.ndim != 2 or self.B.shape[0] != n_x:
            raise ContractViolation(f"B has shape {self.B.shape}, expected ({n_x}, n_u)", field='B')
        if self.C.ndim != 2 or self.C.shape[1] != n_x:
            raise ContractViolation(f"C has shape {self.C.shape}, expected (n_y, {n_x})", field='C')
        if self.sigma_w.shape != (n_x, n_x):
            raise ContractViolation(f"sigma_w has shape {self.sigma_w.shape}", field='sigma_w')
        if self.sigma_v.shape != (self.n_y, self.n_y):
            raise ContractViolation(f"sigma_v has shape {self.sigma_v.shape}", field='sigma_v')
        check_psd(self.sigma_w, 'sigma_w')
        check_psd(self.sigma_v, 'sigma_v')
        if self.u_min.shape != (self.n_u,) or self.u_max.shape != (self.n_u,):
            raise ContractViolation("input bounds must have length n_u", field='u_min')
        if not np.all(self.u_min < self.u_max):
            raise ContractViolation("u_min must be < u_max componentwise", field='u_min')
        if self.t_s <= 0:
            raise ContractViolation("t_s must be positive", field='t_s')
        # frozen dataclass: cache derived quantities via object.__setattr__
        object.__setattr__(self, 'mu_w', np.zeros(n_x) if self.mu_w is None else as_vector(self.mu_w, n_x, 'mu_w'))
        object.__setattr__(self, 'mu_v', np.zeros(self.n_y) if self.mu_v is None else as_vector(self.mu_v, self.n_y, 'mu_v'))
        object.__setattr__(self, '_w_factor', noise_factor(self.sigma_w))
        object.__setattr__(self, '_v_factor', noise_factor(self.sigma_v))

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    def clip_action(self, u: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.u_min, self.u_max)

    def measure(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.C @ x + self.mu_v + self._v_factor @ rng.standard_normal(self.n_y)

    def step(self, state: PlantState, u: np.ndarray, rng: np.random.Generator,
             faults: FaultProcess = CONSTANT_FAULTS) -> Tuple[PlantState, np.ndarray]:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_u,):
            raise ContractViolation(f"input has shape {u.shape}, expected ({self.n_u},)", field='u')
        if state.x.shape != (self.n_x,) or state.z.shape != (self.n_u,):
            raise ContractViolation("plant state dimensions do not match the plant", field='state')
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(state.x)) and np.all(np.isfinite(state.z))):
            raise ContractViolation("non-finite input or state rejected", field='u')

        w = self.mu_w + self._w_factor @ rng.standard_normal(self.n_x)
        x_next = self.A @ state.x + self.B @ (state.z * u) + w
        y_next = self.measure(x_next, rng)
        z_next, dwell_left = faults.advance(state.z, state.dwell_left, rng)
        return PlantState(x=x_next, z=z_next, dwell_left=dwell_left), y_next


def step_plant(plant: FaultPlant, state: PlantState, u: np.ndarray, rng: np.random.Generator,
               faults: FaultProcess = CONSTANT_FAULTS) -> Tuple[PlantState, np.ndarray]:
    """
    Advance the true plant by one sampling period.

    Args:
        plant: Plant definition
        state: Current true state (x_t, z_t)
        u: Input already clipped into the admissible set
        rng: Randomness source for process/measurement noise and fault evolution
        faults: Evolution law of the true fault vector

    Returns:
        (next state, measured output y_{t+1})
    """
    return plant.step(state, u, rng, faults)


def clip_action(u: np.ndarray, plant: FaultPlant) -> np.ndarray:
    return plant.clip_action(u)


def three_tank_matrices(levels, areas, valve_coefficients, gravity: float = 9.81) -> Tuple[np.ndarray, np.ndarray]:
    """
    Continuous-time Torricelli linearization of the three-tank system.

    Tank 1 drains into tank 3, tank 3 into tank 2, tank 2 to the outlet;
    pumps feed tanks 1 and 2. Flow through a pipe with head difference dh is
    c * sqrt(2 g dh), linearized to k * dh with k = c * sqrt(g / (2 dh)).
    """
    h1, h2, h3 = (float(v) for v in levels)
    a1, a2, a3 = (float(v) for v in areas)
    c13, c32, c20 = (float(v) for v in valve_coefficients)
    if not (h1 > h3 > h2 > 0):
        raise ConfigurationError("three_tank.levels must satisfy h1 > h3 > h2 > 0", key='three_tank.levels')

    k13 = c13 * np.sqrt(gravity / (2.0 * (h1 - h3)))
    k32 = c32 * np.sqrt(gravity / (2.0 * (h3 - h2)))
    k20 = c20 * np.sqrt(gravity / (2.0 * h2))

    a_cont = np.array([
        [-k13 / a1, 0.0, k13 / a1],
        [0.0, -(k32 + k20) / a2, k32 / a2],
        [k13 / a3, k32 / a3, -(k13 + k32) / a3],
    ])
    b_cont = np.array([
        [1.0 / a1, 0.0],
        [0.0, 1.0 / a2],
        [0.0, 0.0],
    ])
    return a_cont, b_cont


def discretize(a_cont: np.ndarray, b_cont: np.ndarray, t_s: float, method: str = 'euler') -> Tuple[np.ndarray, np.ndarray]:
    n_x, n_u = b_cont.shape
    if method == 'euler':
        return np.eye(n_x) + t_s * a_cont, t_s * b_cont
    if method == 'exact':
        block = np.zeros((n_x + n_u, n_x + n_u))
        block[:n_x, :n_x] = a_cont
        block[:n_x, n_x:] = b_cont
        phi = expm(block * t_s)
        return phi[:n_x, :n_x], phi[:n_x, n_x:]
    raise ConfigurationError(f"unknown discretization '{method}'", key='discretization')


def plant_from_config(cfg: PlantConfig) -> LinearFaultPlant:
    """
    Build a plant from a validated config.

    Raises:
        ConfigurationError: naming the key whose value is inconsistent
    """
    try:
        if cfg.A is not None and cfg.B is not None:
            a_mat = np.asarray(cfg.A, dtype=float)
            b_mat = np.asarray(cfg.B, dtype=float)
        else:
            tank = cfg.three_tank
            a_cont, b_cont = three_tank_matrices(tank.levels, tank.areas, tank.valve_coefficients, tank.gravity)
            a_mat, b_mat = discretize(a_cont, b_cont, cfg.t_s, cfg.discretization)
        n_x, n_u = b_mat.shape
        c_mat = np.asarray(cfg.C, dtype=float) if cfg.C is not None else np.eye(n_x)[:2]
        n_y = c_mat.shape[0]
        return LinearFaultPlant(
            A=a_mat,
            B=b_mat,
            C=c_mat,
            sigma_w=as_matrix(cfg.sigma_w, n_x, 'sigma_w'),
            sigma_v=as_matrix(cfg.sigma_v, n_y, 'sigma_v'),
            u_min=as_vector(cfg.u_min, n_u, 'u_min'),
            u_max=as_vector(cfg.u_max, n_u, 'u_max'),
            t_s=cfg.t_s,
            mu_w=None if cfg.mu_w is None else as_vector(cfg.mu_w, n_x, 'mu_w'),
            mu_v=None if cfg.mu_v is None else as_vector(cfg.mu_v, n_y, 'mu_v'),
        )
    except ContractViolation as e:
        raise ConfigurationError(f"plant config: {e}", key=e.field) from e


def default_three_tank(path: Union[str, Path, None] = None) -> LinearFaultPlant:
    """
    The shipped three-tank instance: n_x=3, n_u=2, outputs are levels 1 and 2.

    Args:
        path: Optional plant config file; defaults to Config.PLANT_CONFIG when
            that file exists, else to the built-in defaults

    Returns:
        LinearFaultPlant
    """
    if path is None and Path(Config.PLANT_CONFIG).exists():
        path = Config.PLANT_CONFIG
    cfg = load_plant_config(path) if path is not None else PlantConfig(three_tank={})
    plant = plant_from_config(cfg)
    logger.info(f"Three-tank plant ready (t_s={plant.t_s}, n_x={plant.n_x}, n_u={plant.n_u}, n_y={plant.n_y})")
    return plant
