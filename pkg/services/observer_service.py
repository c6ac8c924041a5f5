"""
Passive Fault Observer Service

Closed-form Bayesian filter that tracks Gaussian estimates of the plant state
x and of the actuator effectiveness vector z from inputs and measured outputs.
One observer step runs, in order:

    predict          x_{t+1} prior from the time-t beliefs of x and z
    correct_state    Woodbury-form correction with y_{t+1}
    update_fault     refine z_t using the state correction as a measurement
    propagate_fault  random-walk model for z_{t+1}
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from config import Config, FaultWalkConfig, PriorConfig
from services.errors import ContractViolation, NumericalError
from services.plant_service import LinearFaultPlant, as_matrix, as_vector, check_psd

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Belief:
    """Gaussian estimates x ~ N(mu_x, sigma_x) and z ~ N(mu_z, sigma_z)."""
    mu_x: np.ndarray
    sigma_x: np.ndarray
    mu_z: np.ndarray
    sigma_z: np.ndarray

    def validate(self) -> 'Belief':
        for name in ('mu_x', 'sigma_x', 'mu_z', 'sigma_z'):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError(f"belief {name} has non-finite entries")
        check_psd(self.sigma_x, 'sigma_x')
        check_psd(self.sigma_z, 'sigma_z')
        return self

    @classmethod
    def from_prior(cls, prior: PriorConfig, n_x: int, n_u: int) -> 'Belief':
        return cls(
            mu_x=as_vector(prior.mu_x, n_x, 'prior.mu_x'),
            sigma_x=as_matrix(prior.sigma_x, n_x, 'prior.sigma_x'),
            mu_z=as_vector(prior.mu_z, n_u, 'prior.mu_z'),
            sigma_z=as_matrix(prior.sigma_z, n_u, 'prior.sigma_z'),
        ).validate()


@dataclass(frozen=True)
class PredictedState:
    mu_x_pred: np.ndarray
    sigma_x_pred: np.ndarray
    # B diag(u_t)
    b_star: np.ndarray


@dataclass(frozen=True)
class FaultWalkModel:
    """Random-walk fault dynamics assumed by the filter (not the true fault law)."""
    mu_xi: np.ndarray
    sigma_xi: np.ndarray

    def __post_init__(self):
        check_psd(self.sigma_xi, 'sigma_xi')

    @classmethod
    def from_config(cls, cfg: FaultWalkConfig, n_u: int) -> 'FaultWalkModel':
        return cls(mu_xi=as_vector(cfg.mu_xi, n_u, 'walk.mu_xi'),
                   sigma_xi=as_matrix(cfg.sigma_xi, n_u, 'walk.sigma_xi'))


def symmetrize(cov: np.ndarray) -> np.ndarray:
    return 0.5 * (cov + cov.T)


def _floor(cov: np.ndarray, jitter: float) -> np.ndarray:
    cov = symmetrize(cov)
    if jitter > 0:
        diag = np.diagonal(cov).copy()
        np.fill_diagonal(cov, np.maximum(diag, jitter))
    return cov


def _factor(matrix: np.ndarray, what: str):
    try:
        return cho_factor(symmetrize(matrix), lower=True, check_finite=True)
    except (LinAlgError, ValueError) as e:
        with np.errstate(all='ignore'):
            cond = float(np.linalg.cond(matrix)) if np.all(np.isfinite(matrix)) else float('inf')
        raise NumericalError(f"{what} is singular or not positive definite",
                             diagnostics={'matrix': what, 'condition_number': cond}) from e


def predict(belief: Belief, u: np.ndarray, A: np.ndarray, B: np.ndarray, sigma_w: np.ndarray,
            check: bool = True) -> PredictedState:
    """
    One-step-ahead state prior; the fault uncertainty acts as extra process noise.

    Args:
        belief: Time-t belief
        u: Applied input u_t
        A, B, sigma_w: Plant matrices assumed by the filter
        check: Reject non-PSD covariances before predicting

    Returns:
        PredictedState with mean A mu_x + B* mu_z and covariance
        A Sx A^T + B* Sz B*^T + Sw
    """
    if check:
        belief.validate()
    b_star = B * np.asarray(u, dtype=float)[None, :]
    mu = A @ belief.mu_x + b_star @ belief.mu_z
    sigma = A @ belief.sigma_x @ A.T + b_star @ belief.sigma_z @ b_star.T + sigma_w
    return PredictedState(mu_x_pred=mu, sigma_x_pred=symmetrize(sigma), b_star=b_star)


def correct_state(pred: PredictedState, y: np.ndarray, C: np.ndarray, sigma_v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Woodbury-form measurement correction.

        K = S C^T (Sv + C S C^T)^-1,  S+ = (I - K C) S,  mu+ = mu + K (y - C mu)
    """
    sigma = pred.sigma_x_pred
    innovation_cov = sigma_v + C @ sigma @ C.T
    factor = _factor(innovation_cov, 'innovation covariance')
    gain = cho_solve(factor, C @ sigma).T
    mu_post = pred.mu_x_pred + gain @ (np.asarray(y, dtype=float) - C @ pred.mu_x_pred)
    sigma_post = (np.eye(sigma.shape[0]) - gain @ C) @ sigma
    return mu_post, symmetrize(sigma_post)


def correct_state_information(pred: PredictedState, y: np.ndarray, C: np.ndarray,
                              sigma_v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Information-form correction, (S^-1 + C^T Sv^-1 C)^-1; needs S and Sv invertible."""
    prior_factor = _factor(pred.sigma_x_pred, 'predicted state covariance')
    noise_factor = _factor(sigma_v, 'measurement noise covariance')
    n_x = pred.sigma_x_pred.shape[0]
    information = cho_solve(prior_factor, np.eye(n_x)) + C.T @ cho_solve(noise_factor, C)
    info_factor = _factor(information, 'posterior information matrix')
    sigma_post = cho_solve(info_factor, np.eye(n_x))
    rhs = cho_solve(prior_factor, pred.mu_x_pred) + C.T @ cho_solve(noise_factor, np.asarray(y, dtype=float))
    return sigma_post @ rhs, symmetrize(sigma_post)


def update_fault(belief: Belief, pred: PredictedState, mu_x_post: np.ndarray,
                 sigma_x_post: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Refine the time-t fault estimate with the information carried by y_{t+1}.

        Kz = Sz B*^T (Sx+ + Sx_pred)^-1
        Sz+ = (I - Kz B*) Sz,  mu_z+ = mu_z + Kz (mu_x+ - mu_x_pred)
    """
    b_star = pred.b_star
    if not np.any(b_star):
        return belief.mu_z.copy(), belief.sigma_z.copy()
    denominator = sigma_x_post + pred.sigma_x_pred
    factor = _factor(denominator, 'fault gain denominator')
    gain = cho_solve(factor, b_star @ belief.sigma_z).T
    mu_z = belief.mu_z + gain @ (mu_x_post - pred.mu_x_pred)
    sigma_z = (np.eye(belief.sigma_z.shape[0]) - gain @ b_star) @ belief.sigma_z
    return mu_z, symmetrize(sigma_z)


def propagate_fault(mu_z: np.ndarray, sigma_z: np.ndarray, walk: FaultWalkModel) -> Tuple[np.ndarray, np.ndarray]:
    return mu_z + walk.mu_xi, sigma_z + walk.sigma_xi


def observer_step(belief: Belief, u: np.ndarray, y_next: np.ndarray, plant: LinearFaultPlant,
                  walk: FaultWalkModel, jitter: Optional[float] = None, check: bool = True) -> Belief:
    """
    Full filter cycle from the time-t belief to the time-(t+1) belief.

    Args:
        belief: Time-t belief
        u: Input applied at time t
        y_next: Output measured at time t+1
        plant: Plant matrices (A, B, C, sigma_w, sigma_v) assumed by the filter
        walk: Assumed fault random walk
        jitter: Diagonal floor for stored covariances (default Config.COVARIANCE_JITTER)
        check: Validate the incoming belief

    Returns:
        Belief at time t+1
    """
    jitter = Config.COVARIANCE_JITTER if jitter is None else jitter
    pred = predict(belief, u, plant.A, plant.B, plant.sigma_w, check=check)
    mu_x, sigma_x = correct_state(pred, y_next, plant.C, plant.sigma_v)
    mu_z, sigma_z = update_fault(belief, pred, mu_x, sigma_x)
    mu_z, sigma_z = propagate_fault(mu_z, sigma_z, walk)
    updated = Belief(mu_x=mu_x, sigma_x=_floor(sigma_x, jitter), mu_z=mu_z, sigma_z=_floor(sigma_z, jitter))
    if not (np.all(np.isfinite(updated.mu_x)) and np.all(np.isfinite(updated.mu_z))):
        raise NumericalError("observer produced non-finite estimates")
    return updated


def triu(matrix: np.ndarray) -> np.ndarray:
    """Row-major upper triangle (diagonal included)."""
    return matrix[np.triu_indices(matrix.shape[0])]


def from_triu(values: np.ndarray, size: int) -> np.ndarray:
    expected = size * (size + 1) // 2
    values = np.asarray(values, dtype=float)
    if values.shape != (expected,):
        raise ContractViolation(f"triu vector has length {values.shape}, expected {expected}")
    out = np.zeros((size, size))
    rows, cols = np.triu_indices(size)
    out[rows, cols] = values
    out[cols, rows] = values
    return out


def belief_frame(beliefs: Iterable[Belief]) -> pd.DataFrame:
    """Belief trajectory as a table: t, mu_x_i, sigma_x_ij (i<=j), mu_z_i, sigma_z_ij."""
    rows: List[dict] = []
    for t, belief in enumerate(beliefs):
        row = {'t': t}
        row.update({f'mu_x_{i}': v for i, v in enumerate(belief.mu_x)})
        rows_x, cols_x = np.triu_indices(belief.sigma_x.shape[0])
        row.update({f'sigma_x_{i}{j}': belief.sigma_x[i, j] for i, j in zip(rows_x, cols_x)})
        row.update({f'mu_z_{i}': v for i, v in enumerate(belief.mu_z)})
        rows_z, cols_z = np.triu_indices(belief.sigma_z.shape[0])
        row.update({f'sigma_z_{i}{j}': belief.sigma_z[i, j] for i, j in zip(rows_z, cols_z)})
        rows.append(row)
    return pd.DataFrame(rows)
