"""
Constrained Policy Optimization Service

On-policy trust-region update for one reward stream and one cost stream:

    max  g^T x   s.t.  c + b^T x <= 0,  1/2 x^T H x <= max_kl

solved in closed form through its dual after conjugate-gradient solves
against the KL Hessian H. Infeasible subproblems fall back to a pure
cost-reduction step. A backtracking line search checks every candidate on
the sampled KL, cost surrogate and reward surrogate.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from config import CpoConfig
from services.errors import ContractViolation, NumericalError
from services.policy_service import GaussianPolicy, ValueFunction

logger = logging.getLogger(__name__)

EPS = 1e-8


@dataclass
class TrajectoryBatch:
    """Per-step arrays for all episodes of one collection round, concatenated in episode order."""
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    episode_lengths: np.ndarray
    reward_advantages: Optional[np.ndarray] = None
    cost_advantages: Optional[np.ndarray] = None
    reward_targets: Optional[np.ndarray] = None
    cost_targets: Optional[np.ndarray] = None

    def __post_init__(self):
        self.episode_lengths = np.asarray(self.episode_lengths, dtype=int)
        self.validate()

    def validate(self) -> 'TrajectoryBatch':
        n = self.observations.shape[0]
        if np.any(self.episode_lengths < 1) or int(self.episode_lengths.sum()) != n:
            raise ContractViolation(
                f"episode lengths sum to {int(self.episode_lengths.sum())} but the batch has {n} steps",
                field='episode_lengths')
        for name in ('actions', 'log_probs', 'rewards', 'costs', 'reward_advantages',
                     'cost_advantages', 'reward_targets', 'cost_targets'):
            values = getattr(self, name)
            if values is not None and values.shape[0] != n:
                raise ContractViolation(f"{name} has {values.shape[0]} rows, expected {n}", field=name)
        return self

    @property
    def n_steps(self) -> int:
        return self.observations.shape[0]

    @property
    def n_episodes(self) -> int:
        return len(self.episode_lengths)

    def episode_slices(self) -> List[slice]:
        ends = np.cumsum(self.episode_lengths)
        return [slice(int(end - length), int(end)) for end, length in zip(ends, self.episode_lengths)]

    def episode_returns(self, values: np.ndarray, gamma: float = 1.0) -> np.ndarray:
        return np.array([discounted_sum(values[s], gamma) for s in self.episode_slices()])

    def cost_return_mean(self, gamma_c: float = 1.0) -> float:
        """J_C estimate: mean per-episode discounted cost return."""
        return float(np.mean(self.episode_returns(self.costs, gamma_c)))

    def reward_return_mean(self, gamma: float = 1.0) -> float:
        return float(np.mean(self.episode_returns(self.rewards, gamma)))

    @classmethod
    def concatenate(cls, episodes: List[dict]) -> 'TrajectoryBatch':
        """Build a batch from per-episode dicts of equal-length arrays."""
        if not episodes:
            raise ContractViolation("cannot build a batch from zero episodes", field='episodes')
        return cls(
            observations=np.concatenate([e['observations'] for e in episodes]),
            actions=np.concatenate([e['actions'] for e in episodes]),
            log_probs=np.concatenate([e['log_probs'] for e in episodes]),
            rewards=np.concatenate([e['rewards'] for e in episodes]),
            costs=np.concatenate([e['costs'] for e in episodes]),
            episode_lengths=np.array([len(e['rewards']) for e in episodes]),
        )


def discounted_sum(values: np.ndarray, gamma: float) -> float:
    return float(np.sum(values * gamma ** np.arange(len(values))))


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """
    Generalized advantage estimates for one episode that terminates at its
    last step (bootstrap value 0).
    """
    next_values = np.append(values[1:], 0.0)
    deltas = rewards + gamma * next_values - values
    advantages = np.zeros_like(deltas)
    running = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        running = deltas[t] + gamma * lam * running
        advantages[t] = running
    return advantages


def _values(value_fn: Optional[ValueFunction], obs: np.ndarray) -> np.ndarray:
    if value_fn is None:
        return np.zeros(obs.shape[0])
    return value_fn.predict(obs)


def estimate_advantages(batch: TrajectoryBatch, reward_value: Optional[ValueFunction],
                        cost_value: Optional[ValueFunction], gamma: float, gamma_c: float,
                        lam: float, normalize: bool = True) -> TrajectoryBatch:
    """
    GAE for the reward and cost streams, plus TD(lambda) value targets.

    Args:
        batch: Collected steps
        reward_value, cost_value: Baselines; None means V = 0
        gamma, gamma_c: Reward and cost discounts
        lam: GAE parameter
        normalize: Standardize reward advantages over the batch (cost
            advantages are never rescaled)

    Returns:
        Copy of the batch with advantages and targets filled in
    """
    batch.validate()
    v_r = _values(reward_value, batch.observations)
    v_c = _values(cost_value, batch.observations)
    adv_r = np.zeros(batch.n_steps)
    adv_c = np.zeros(batch.n_steps)
    for s in batch.episode_slices():
        adv_r[s] = gae(batch.rewards[s], v_r[s], gamma, lam)
        adv_c[s] = gae(batch.costs[s], v_c[s], gamma_c, lam)
    targets_r = adv_r + v_r
    targets_c = adv_c + v_c
    if normalize:
        adv_r = (adv_r - adv_r.mean()) / (adv_r.std() + EPS)
    return replace(batch, reward_advantages=adv_r, cost_advantages=adv_c,
                   reward_targets=targets_r, cost_targets=targets_c)


@dataclass(frozen=True)
class CgResult:
    x: np.ndarray
    iterations: int
    relative_residual: float
    converged: bool


def cg_solve(operator: Callable[[np.ndarray], np.ndarray], g: np.ndarray,
             iterations: int = 10, tol: float = 1e-8) -> CgResult:
    """
    Conjugate-gradient solve of H x = g for a symmetric positive-definite operator.

    Raises:
        NumericalError: if the iteration produces non-finite values
    """
    g = np.asarray(g, dtype=float)
    g_norm = float(np.linalg.norm(g))
    x = np.zeros_like(g)
    if g_norm == 0.0:
        return CgResult(x=x, iterations=0, relative_residual=0.0, converged=True)
    r = g.copy()
    p = g.copy()
    rr = float(r @ r)
    done = 0
    for i in range(iterations):
        hp = operator(p)
        php = float(p @ hp)
        if not np.isfinite(php):
            raise NumericalError("conjugate gradient hit a non-finite curvature",
                                 diagnostics={'iteration': i})
        if php <= 0.0:
            logger.warning(f"CG stopped at iteration {i}: operator not positive definite (p^T H p = {php:.3e})")
            break
        alpha = rr / php
        x = x + alpha * p
        r = r - alpha * hp
        rr_new = float(r @ r)
        done = i + 1
        if np.sqrt(rr_new) / g_norm <= tol:
            rr = rr_new
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    if not np.all(np.isfinite(x)):
        raise NumericalError("conjugate gradient produced non-finite values", diagnostics={'iterations': done})
    residual = float(np.linalg.norm(operator(x) - g)) / g_norm
    return CgResult(x=x, iterations=done, relative_residual=residual, converged=residual <= tol)


@dataclass
class CpoDiagnostics:
    step_type: str
    optim_case: int
    kl: float
    step_fraction: float
    backtracks: int
    cost_return: float
    cost_limit: float
    mean_return: float
    surrogate_reward_change: float = 0.0
    surrogate_cost_change: float = 0.0
    cg_reward: Optional[CgResult] = None
    cg_cost: Optional[CgResult] = None
    search_direction: Optional[np.ndarray] = field(default=None, repr=False)

    def to_record(self) -> Dict[str, object]:
        """Flat JSON-safe view for the training log."""
        record = {
            'step_type': self.step_type,
            'optim_case': self.optim_case,
            'kl': self.kl,
            'step_fraction': self.step_fraction,
            'backtracks': self.backtracks,
            'cost_return': self.cost_return,
            'cost_limit': self.cost_limit,
            'mean_return': self.mean_return,
            'surrogate_reward_change': self.surrogate_reward_change,
            'surrogate_cost_change': self.surrogate_cost_change,
        }
        for name, result in (('cg_reward', self.cg_reward), ('cg_cost', self.cg_cost)):
            record[f'{name}_iterations'] = result.iterations if result is not None else 0
            record[f'{name}_residual'] = result.relative_residual if result is not None else 0.0
        return record


def _ratio(num: float, den: float) -> float:
    if den == 0.0:
        return 0.0 if num == 0.0 else float(np.copysign(np.inf, num))
    return num / den


def solve_trust_region(q: float, r: float, s: float, c: float, max_kl: float,
                       cost_free: bool) -> Tuple[int, float, float]:
    """
    Dual of the linearized subproblem.

    Args:
        q: g^T H^-1 g
        r: g^T H^-1 b
        s: b^T H^-1 b
        c: Constraint value (positive means currently infeasible)
        max_kl: Trust radius
        cost_free: Cost gradient negligible and constraint satisfied

    Returns:
        (optim_case, lam, nu); cases 4/3 unconstrained, 2/1 constrained,
        0 infeasible (recovery). Without a usable cost direction (s ~ 0) a
        satisfied constraint gives case 4 and a violated one gives case 0
        with nu = 0, i.e. no step.
    """
    if cost_free or (s <= EPS and c <= 0):
        return 4, float(np.sqrt(q / (2.0 * max_kl))), 0.0
    if s <= EPS:
        return 0, 0.0, 0.0

    a_term = q - r ** 2 / s
    b_term = 2.0 * max_kl - c ** 2 / s
    if c < 0 and b_term < 0:
        optim_case = 3
    elif c < 0 and b_term >= 0:
        optim_case = 2
    elif c >= 0 and b_term >= 0:
        optim_case = 1
    else:
        optim_case = 0

    if optim_case == 3:
        return optim_case, float(np.sqrt(q / (2.0 * max_kl))), 0.0
    if optim_case == 0:
        return optim_case, 0.0, float(np.sqrt(2.0 * max_kl / (s + EPS)))

    def project(value, bounds):
        return max(bounds[0], min(bounds[1], value))

    pivot = _ratio(r, c)
    range_a, range_b = [0.0, pivot], [pivot, np.inf]
    if c >= 0:
        range_a, range_b = range_b, range_a
    lam_a = project(np.sqrt(max(a_term, 0.0) / max(b_term, EPS)), range_a)
    lam_b = project(np.sqrt(q / (2.0 * max_kl)), range_b)

    def f_a(lam):
        return -0.5 * (a_term / (lam + EPS) + b_term * lam) - r * c / (s + EPS)

    def f_b(lam):
        return -0.5 * (q / (lam + EPS) + 2.0 * max_kl * lam)

    lam = lam_a if f_a(lam_a) >= f_b(lam_b) else lam_b
    nu = max(0.0, lam * c - r) / (s + EPS)
    return optim_case, float(lam), float(nu)


def horizon_factor(batch: TrajectoryBatch, gamma_c: float) -> float:
    """Effective horizon converting a per-step surrogate change into a return change."""
    if gamma_c >= 1.0:
        return float(np.mean(batch.episode_lengths))
    return 1.0 / (1.0 - gamma_c)


def cpo_update(batch: TrajectoryBatch, policy: GaussianPolicy, config: CpoConfig,
               cost_limit: float, gamma_c: float = 1.0,
               gamma: float = 1.0) -> Tuple[GaussianPolicy, CpoDiagnostics]:
    """
    One constrained trust-region step.

    Args:
        batch: Steps collected under `policy`, advantages filled in
        policy: Current policy
        config: Trust radius and solver settings
        cost_limit: Budget d on the per-episode cost return
        gamma_c: Cost discount used for J_C and the surrogate scaling
        gamma: Reward discount used for the reported mean return

    Returns:
        (new policy, diagnostics); the input policy is returned unchanged
        when no line-search candidate is accepted

    Raises:
        ContractViolation: advantages missing
        NumericalError: non-finite gradients or solver values
    """
    if batch.reward_advantages is None or batch.cost_advantages is None:
        raise ContractViolation("estimate_advantages must run before cpo_update", field='advantages')
    obs, actions, old_logp = batch.observations, batch.actions, batch.log_probs
    cost_return = batch.cost_return_mean(gamma_c)
    mean_return = batch.reward_return_mean(gamma)

    surr_reward, grad_reward = policy.surrogate(obs, actions, old_logp, batch.reward_advantages)
    surr_cost, b = policy.surrogate(obs, actions, old_logp, batch.cost_advantages)
    # minimize the negative reward surrogate
    g = -grad_reward
    loss_old = -surr_reward
    c = (cost_return - cost_limit) / (horizon_factor(batch, gamma_c) + EPS)

    diagnostics = CpoDiagnostics(step_type='feasible', optim_case=4, kl=0.0, step_fraction=0.0, backtracks=0,
                                 cost_return=cost_return, cost_limit=cost_limit, mean_return=mean_return)
    if not np.any(g) and not np.any(b):
        logger.info("Zero reward and cost gradients, policy unchanged")
        return policy, diagnostics

    def fvp(v):
        return policy.fisher_vector_product(obs, v, config.damping)

    cg_g = cg_solve(fvp, g, config.cg_iterations, config.cg_tolerance)
    v = cg_g.x
    q = float(g @ v)
    cost_free = float(b @ b) <= 1e-8 and c <= 0
    cg_b = None
    w, r, s = np.zeros_like(b), 0.0, 0.0
    if not cost_free:
        cg_b = cg_solve(fvp, b, config.cg_iterations, config.cg_tolerance)
        w = cg_b.x
        r = float(w @ g)
        s = float(w @ b)
    optim_case, lam, nu = solve_trust_region(q, r, s, c, config.max_kl, cost_free)

    if optim_case > 0:
        direction = (v + nu * w) / (lam + EPS)
    else:
        direction = nu * w
    if not np.all(np.isfinite(direction)):
        raise NumericalError("CPO search direction is not finite",
                             diagnostics={'q': q, 'r': r, 's': s, 'c': c, 'optim_case': optim_case})

    diagnostics.optim_case = optim_case
    diagnostics.cg_reward = cg_g
    diagnostics.cg_cost = cg_b
    diagnostics.search_direction = direction
    step_type = 'recovery' if optim_case == 0 else 'feasible'

    # 'best' scans the whole backtracking grid and keeps the accepted
    # candidate with the largest reward surrogate; recovery steps always
    # take the first accepted candidate
    scan_all = config.line_search == 'best' and optim_case > 0
    accepted = None
    fraction = 1.0
    for j in range(config.backtrack_steps):
        candidate = policy.params - fraction * direction
        kl = policy.kl(policy, obs, params=candidate)
        surr_reward_new, _ = policy.surrogate(obs, actions, old_logp, batch.reward_advantages, params=candidate)
        surr_cost_new, _ = policy.surrogate(obs, actions, old_logp, batch.cost_advantages, params=candidate)
        loss_new = -surr_reward_new
        reward_ok = optim_case == 0 or loss_new <= loss_old
        cost_ok = surr_cost_new - surr_cost <= max(-c, 0.0) + config.cost_slack
        if np.isfinite(kl) and kl <= config.max_kl and reward_ok and cost_ok:
            if accepted is None or surr_reward_new > accepted[4]:
                accepted = (j, fraction, candidate, float(kl), surr_reward_new, surr_cost_new)
            if not scan_all:
                break
        fraction *= config.backtrack_factor

    if accepted is not None:
        j, fraction, candidate, kl, surr_reward_new, surr_cost_new = accepted
        diagnostics.step_type = step_type
        diagnostics.kl = kl
        diagnostics.step_fraction = fraction
        diagnostics.backtracks = j
        diagnostics.surrogate_reward_change = surr_reward_new - surr_reward
        diagnostics.surrogate_cost_change = surr_cost_new - surr_cost
        return policy.with_params(candidate), diagnostics

    logger.warning(f"Line search rejected all {config.backtrack_steps} candidates (case {optim_case})")
    diagnostics.step_type = 'rejected'
    diagnostics.backtracks = config.backtrack_steps
    return policy, diagnostics


def _fit_one(value_fn: ValueFunction, obs: np.ndarray, targets: np.ndarray, config: CpoConfig) -> Tuple[ValueFunction, Dict[str, float]]:
    if config.value_epochs == 0:
        loss, _ = value_fn.loss_and_grad(value_fn.params, obs, targets, config.value_l2)
        return value_fn, {'loss_before': loss, 'loss_after': loss, 'retries': 0}

    def objective(params):
        return value_fn.loss_and_grad(params, obs, targets, config.value_l2)

    loss_before, _ = objective(value_fn.params)
    iterations = config.value_epochs
    retries = 0
    while iterations >= 1:
        result = minimize(objective, value_fn.params, jac=True, method='L-BFGS-B',
                          options={'maxiter': iterations})
        loss_after = float(result.fun)
        if np.isfinite(loss_after) and np.all(np.isfinite(result.x)) and loss_after <= loss_before:
            fitted = ValueFunction(value_fn.net, result.x, value_fn.normalizer)
            return fitted, {'loss_before': loss_before, 'loss_after': loss_after, 'retries': retries}
        retries += 1
        iterations //= 2
        logger.warning(f"Value fit increased the loss ({loss_before:.4e} -> {loss_after:.4e}); retrying with {iterations} iterations")
    logger.error("Value fit diverged, keeping the previous parameters")
    return value_fn, {'loss_before': loss_before, 'loss_after': loss_before, 'retries': retries, 'diverged': 1.0}


def fit_values(batch: TrajectoryBatch, reward_value: ValueFunction, cost_value: ValueFunction,
               config: CpoConfig) -> Tuple[ValueFunction, ValueFunction, Dict[str, float]]:
    """
    Mean-squared-error regression of both value functions on their targets.

    Returns:
        (reward value, cost value, diagnostics); a function whose fit would
        raise the training loss is returned unchanged
    """
    if batch.reward_targets is None or batch.cost_targets is None:
        raise ContractViolation("value targets are missing", field='targets')
    fitted_r, info_r = _fit_one(reward_value, batch.observations, batch.reward_targets, config)
    fitted_c, info_c = _fit_one(cost_value, batch.observations, batch.cost_targets, config)
    diagnostics = {f'value_reward_{k}': v for k, v in info_r.items()}
    diagnostics.update({f'value_cost_{k}': v for k, v in info_c.items()})
    return fitted_r, fitted_c, diagnostics
