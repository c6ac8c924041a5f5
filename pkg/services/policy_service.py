"""
Policy Network Service

Small fully-connected networks with hand-written reverse-mode and
forward-mode passes, a diagonal-Gaussian policy on top of them, a scalar
value function, a running observation normalizer and the checkpoint format.

Parameters are always handled as one flat float vector per network so the
trust-region update can treat them as a point in R^n.
"""

import json
import logging
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from config import Config, PolicyConfig
from services.errors import ConfigurationError, ContractViolation, NumericalError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

# objective(mean, log_std) -> (value, d value / d mean, d value / d log_std)
PolicyObjective = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray, np.ndarray]]


def orthogonal(shape: Tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class MLP:
    """
    Feed-forward tanh network with a linear output layer.

    Flat layout: for each layer, W (out x in) row-major followed by b (out).
    """

    def __init__(self, sizes: Sequence[int]):
        if len(sizes) < 2 or min(sizes) < 1:
            raise ContractViolation(f"invalid layer sizes {list(sizes)}", field='hidden_sizes')
        self.sizes = [int(s) for s in sizes]
        self.shapes = [(self.sizes[i + 1], self.sizes[i]) for i in range(len(self.sizes) - 1)]
        self.n_params = sum(o * i + o for o, i in self.shapes)

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def init_params(self, rng: np.random.Generator, output_scale: float = 0.01) -> np.ndarray:
        layers = []
        for k, shape in enumerate(self.shapes):
            last = k == len(self.shapes) - 1
            layers.append((orthogonal(shape, output_scale if last else 1.0, rng), np.zeros(shape[0])))
        return self.flatten(layers)

    def flatten(self, layers: List[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in layers]) if layers else np.zeros(0)

    def unflatten(self, params: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise ContractViolation(f"expected {self.n_params} parameters, got {params.shape}", field='params')
        layers, offset = [], 0
        for out_dim, in_dim in self.shapes:
            w = params[offset:offset + out_dim * in_dim].reshape(out_dim, in_dim)
            offset += out_dim * in_dim
            b = params[offset:offset + out_dim]
            offset += out_dim
            layers.append((w, b))
        return layers

    def forward(self, params: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, list]:
        """Returns (outputs (N, n_out), cache of layer inputs for backward/jvp)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.n_in:
            raise ContractViolation(f"input width {x.shape[1]} != {self.n_in}", field='obs')
        layers = self.unflatten(params)
        activations = [x]
        h = x
        for k, (w, b) in enumerate(layers):
            h = h @ w.T + b
            if k < len(layers) - 1:
                h = np.tanh(h)
            activations.append(h)
        return h, activations

    def backward(self, params: np.ndarray, activations: list, d_out: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product: gradient of sum(d_out * outputs) w.r.t. params."""
        layers = self.unflatten(params)
        grads = [None] * len(layers)
        delta = np.asarray(d_out, dtype=float)
        for k in range(len(layers) - 1, -1, -1):
            w, _ = layers[k]
            h_in = activations[k]
            grads[k] = (delta.T @ h_in, delta.sum(axis=0))
            if k > 0:
                delta = (delta @ w) * (1.0 - h_in ** 2)
        return self.flatten(grads)

    def jvp(self, params: np.ndarray, activations: list, tangent: np.ndarray) -> np.ndarray:
        """Jacobian-vector product: directional derivative of the outputs along `tangent`."""
        layers = self.unflatten(params)
        d_layers = self.unflatten(tangent)
        dh = np.zeros_like(activations[0])
        for k, ((w, _), (dw, db)) in enumerate(zip(layers, d_layers)):
            da = dh @ w.T + activations[k] @ dw.T + db
            if k < len(layers) - 1:
                dh = (1.0 - activations[k + 1] ** 2) * da
            else:
                dh = da
        return dh


class ObservationNormalizer:
    """Running mean/variance (parallel-merge form); identity until the first update."""

    def __init__(self, size: int, clip: float = 10.0, eps: float = 1e-8):
        self.size = size
        self.clip = clip
        self.eps = eps
        self.mean = np.zeros(size)
        self.var = np.ones(size)
        self.count = 0
        self.frozen = False

    def update(self, batch: np.ndarray) -> None:
        if self.frozen:
            return
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        n = batch.shape[0]
        if n == 0:
            return
        batch_mean = batch.mean(axis=0)
        batch_var = batch.var(axis=0)
        if self.count == 0:
            self.mean, self.var, self.count = batch_mean, batch_var, n
            return
        total = self.count + n
        delta = batch_mean - self.mean
        m2 = self.var * self.count + batch_var * n + delta ** 2 * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.var = m2 / total
        self.count = total

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        if self.count == 0:
            return np.asarray(obs, dtype=float)
        return np.clip((obs - self.mean) / np.sqrt(self.var + self.eps), -self.clip, self.clip)

    def state(self) -> dict:
        return {'mean': self.mean.tolist(), 'var': self.var.tolist(), 'count': int(self.count)}

    def load(self, state: dict) -> None:
        self.mean = np.asarray(state['mean'], dtype=float)
        self.var = np.asarray(state['var'], dtype=float)
        self.count = int(state['count'])

    def frozen_copy(self) -> 'ObservationNormalizer':
        copy = ObservationNormalizer(self.size, self.clip, self.eps)
        copy.load(self.state())
        copy.frozen = True
        return copy


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - mean) / np.exp(log_std)
    return -0.5 * np.sum(z ** 2, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_kl(mean_new, log_std_new, mean_old, log_std_old) -> np.ndarray:
    """Per-row KL(new || old) between diagonal Gaussians."""
    var_new = np.exp(2.0 * log_std_new)
    var_old = np.exp(2.0 * log_std_old)
    return np.sum(log_std_old - log_std_new + (var_new + (mean_new - mean_old) ** 2) / (2.0 * var_old) - 0.5, axis=-1)


class GaussianPolicy:
    """
    Diagonal-Gaussian policy pi(a|o) = N(scale * net(norm(o)), diag(exp(log_std))^2).

    The flat parameter vector is [net params | log_std]; log_std does not
    depend on the observation.
    """

    def __init__(self, net: MLP, params: np.ndarray, action_scale: np.ndarray,
                 normalizer: Optional[ObservationNormalizer] = None, learn_log_std: bool = True):
        self.net = net
        self.action_scale = np.asarray(action_scale, dtype=float)
        if self.action_scale.shape != (net.n_out,):
            raise ContractViolation("action_scale must have one entry per action", field='action_scale')
        self.normalizer = normalizer
        self.learn_log_std = learn_log_std
        self.params = np.asarray(params, dtype=float).copy()
        if self.params.shape != (self.n_params,):
            raise ContractViolation(f"expected {self.n_params} policy parameters", field='params')

    @classmethod
    def from_config(cls, cfg: PolicyConfig, obs_size: int, u_min: np.ndarray, u_max: np.ndarray,
                    rng: np.random.Generator) -> 'GaussianPolicy':
        u_range = np.asarray(u_max, dtype=float) - np.asarray(u_min, dtype=float)
        net = MLP([obs_size, *cfg.hidden_sizes, u_range.shape[0]])
        log_std = np.log(cfg.init_std_fraction * u_range)
        params = np.concatenate([net.init_params(rng, cfg.output_scale), log_std])
        normalizer = ObservationNormalizer(obs_size) if cfg.normalize_observations else None
        return cls(net, params, u_range / 2.0, normalizer, cfg.learn_log_std)

    @property
    def n_params(self) -> int:
        return self.net.n_params + self.action_size

    @property
    def action_size(self) -> int:
        return self.net.n_out

    @property
    def observation_size(self) -> int:
        return self.net.n_in

    def with_params(self, params: np.ndarray) -> 'GaussianPolicy':
        return GaussianPolicy(self.net, params, self.action_scale, self.normalizer, self.learn_log_std)

    def frozen_copy(self) -> 'GaussianPolicy':
        """Same parameters, with a frozen private copy of the observation normalizer."""
        normalizer = self.normalizer.frozen_copy() if self.normalizer is not None else None
        return GaussianPolicy(self.net, self.params, self.action_scale, normalizer, self.learn_log_std)

    def _split(self, params: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        params = self.params if params is None else np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise ContractViolation(f"expected {self.n_params} policy parameters, got {params.shape}", field='params')
        return params[:self.net.n_params], params[self.net.n_params:]

    def _inputs(self, obs: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if obs.shape[1] != self.observation_size:
            raise ContractViolation(f"observation width {obs.shape[1]} != {self.observation_size}", field='obs')
        return self.normalizer(obs) if self.normalizer is not None else obs

    def log_std(self, params: Optional[np.ndarray] = None) -> np.ndarray:
        return np.clip(self._split(params)[1], Config.LOG_STD_MIN, Config.LOG_STD_MAX)

    def _forward(self, obs: np.ndarray, params: Optional[np.ndarray] = None):
        net_params, _ = self._split(params)
        out, cache = self.net.forward(net_params, self._inputs(obs))
        return self.action_scale * out, self.log_std(params), cache

    def forward(self, obs: np.ndarray, params: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        Args:
            obs: One observation (n_obs,) or a batch (N, n_obs)

        Returns:
            (mean, std); shapes follow the input (1-D in, 1-D out)
        """
        mean, log_std, _ = self._forward(obs, params)
        std = np.exp(log_std)
        if np.ndim(obs) == 1:
            return mean[0], std
        return mean, np.broadcast_to(std, mean.shape).copy()

    def log_prob(self, obs: np.ndarray, actions: np.ndarray, params: Optional[np.ndarray] = None) -> np.ndarray:
        mean, log_std, _ = self._forward(obs, params)
        result = gaussian_log_prob(np.atleast_2d(actions), mean, log_std)
        return result[0] if np.ndim(obs) == 1 else result

    def sample(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mean, std = self.forward(obs)
        return mean + std * rng.standard_normal(np.shape(mean))

    def act(self, obs: np.ndarray, rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
        if deterministic:
            return self.forward(obs)[0]
        return self.sample(obs, rng)

    def kl(self, old: 'GaussianPolicy', obs: np.ndarray, params: Optional[np.ndarray] = None) -> float:
        """Batch-mean KL(self || old); `params` overrides this policy's parameters."""
        mean_new, log_std_new, _ = self._forward(obs, params)
        mean_old, log_std_old, _ = old._forward(obs)
        return float(np.mean(gaussian_kl(mean_new, log_std_new, mean_old, log_std_old)))

    def grad(self, obs: np.ndarray, objective: PolicyObjective, l2: float = 0.0,
             params: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
        """
        Reverse-mode gradient of objective(mean, log_std) + l2/2 * ||theta||^2.

        Returns:
            (objective value, flat gradient)

        Raises:
            NumericalError: on any non-finite value or gradient
        """
        net_params, raw_log_std = self._split(params)
        mean, log_std, cache = self._forward(obs, params)
        value, d_mean, d_log_std = objective(mean, log_std)
        g_net = self.net.backward(net_params, cache, np.asarray(d_mean) * self.action_scale)
        in_bounds = (raw_log_std >= Config.LOG_STD_MIN) & (raw_log_std <= Config.LOG_STD_MAX)
        g_log_std = np.where(in_bounds, d_log_std, 0.0) if self.learn_log_std else np.zeros_like(raw_log_std)
        flat = np.concatenate([g_net, g_log_std])
        full = self.params if params is None else np.asarray(params, dtype=float)
        value = float(value) + 0.5 * l2 * float(full @ full)
        flat = flat + l2 * full
        if not (np.isfinite(value) and np.all(np.isfinite(flat))):
            raise NumericalError("non-finite policy gradient", diagnostics={'objective': value})
        return value, flat

    def surrogate(self, obs: np.ndarray, actions: np.ndarray, old_log_probs: np.ndarray,
                  advantages: np.ndarray, params: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
        """mean(exp(log pi - log pi_old) * A) and its gradient."""
        actions = np.atleast_2d(actions)

        def objective(mean, log_std):
            std = np.exp(log_std)
            ratio = np.exp(gaussian_log_prob(actions, mean, log_std) - old_log_probs)
            weight = ratio * advantages / len(advantages)
            resid = (actions - mean) / std
            d_mean = weight[:, None] * resid / std
            d_log_std = np.sum(weight[:, None] * (resid ** 2 - 1.0), axis=0)
            return float(np.sum(weight)), d_mean, d_log_std

        return self.grad(obs, objective, params=params)

    def kl_grad(self, old: 'GaussianPolicy', obs: np.ndarray, params: Optional[np.ndarray] = None) -> np.ndarray:
        """Gradient of the batch-mean KL(pi_params || old) w.r.t. params."""
        mean_old, log_std_old, _ = old._forward(obs)
        var_old = np.exp(2.0 * log_std_old)
        n = mean_old.shape[0]

        def objective(mean, log_std):
            var = np.exp(2.0 * log_std)
            value = float(np.mean(gaussian_kl(mean, log_std, mean_old, log_std_old)))
            return value, (mean - mean_old) / var_old / n, -1.0 + var / var_old

        return self.grad(obs, objective, params=params)[1]

    def fisher_vector_product(self, obs: np.ndarray, v: np.ndarray, damping: float = 0.0) -> np.ndarray:
        """
        (H + damping I) v with H the Hessian of the batch-mean KL(pi || pi_current)
        at the current parameters; evaluated as J^T (J v / sigma^2) without
        forming H.
        """
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_params,):
            raise ContractViolation(f"vector has shape {v.shape}, expected ({self.n_params},)", field='v')
        net_params, _ = self._split(None)
        v_net, v_log_std = v[:self.net.n_params], v[self.net.n_params:]
        _, log_std, cache = self._forward(obs)
        n = cache[0].shape[0]
        jv = self.action_scale * self.net.jvp(net_params, cache, v_net)
        weighted = jv / np.exp(2.0 * log_std) / n
        hv_net = self.net.backward(net_params, cache, weighted * self.action_scale)
        # frozen log_std: identity block keeps the operator invertible
        hv_log_std = 2.0 * v_log_std if self.learn_log_std else v_log_std
        return np.concatenate([hv_net, hv_log_std]) + damping * v


class ValueFunction:
    """Scalar regressor V(o) = net(norm(o)) used for reward and cost baselines."""

    def __init__(self, net: MLP, params: np.ndarray, normalizer: Optional[ObservationNormalizer] = None):
        if net.n_out != 1:
            raise ContractViolation("value network must have one output", field='hidden_sizes')
        self.net = net
        self.params = np.asarray(params, dtype=float).copy()
        self.normalizer = normalizer

    @classmethod
    def from_config(cls, cfg: PolicyConfig, obs_size: int, rng: np.random.Generator,
                    normalizer: Optional[ObservationNormalizer] = None) -> 'ValueFunction':
        net = MLP([obs_size, *cfg.hidden_sizes, 1])
        return cls(net, net.init_params(rng, output_scale=1.0), normalizer)

    def _inputs(self, obs: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        return self.normalizer(obs) if self.normalizer is not None else obs

    def predict(self, obs: np.ndarray, params: Optional[np.ndarray] = None) -> np.ndarray:
        params = self.params if params is None else params
        return self.net.forward(params, self._inputs(obs))[0][:, 0]

    def loss_and_grad(self, params: np.ndarray, obs: np.ndarray, targets: np.ndarray,
                      l2: float = 0.0) -> Tuple[float, np.ndarray]:
        out, cache = self.net.forward(params, self._inputs(obs))
        resid = out[:, 0] - targets
        n = resid.shape[0]
        loss = float(resid @ resid) / n + 0.5 * l2 * float(params @ params)
        grad = self.net.backward(params, cache, (2.0 * resid / n)[:, None]) + l2 * params
        return loss, grad


class CheckpointModel(BaseModel):
    version: int
    observation_size: int
    action_size: int
    hidden_sizes: List[int]
    activation: str
    action_scale: List[float]
    learn_log_std: bool
    policy_params: List[float]
    reward_value_params: List[float]
    cost_value_params: List[float]
    normalizer: Optional[dict] = None


def save_checkpoint(path: Union[str, Path], policy: GaussianPolicy, reward_value: ValueFunction,
                    cost_value: ValueFunction) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = CheckpointModel(
        version=Config.CHECKPOINT_VERSION,
        observation_size=policy.observation_size,
        action_size=policy.action_size,
        hidden_sizes=policy.net.sizes[1:-1],
        activation='tanh',
        action_scale=policy.action_scale.tolist(),
        learn_log_std=policy.learn_log_std,
        policy_params=policy.params.tolist(),
        reward_value_params=reward_value.params.tolist(),
        cost_value_params=cost_value.params.tolist(),
        normalizer=policy.normalizer.state() if policy.normalizer is not None else None,
    )
    path.write_text(json.dumps(model.model_dump(), sort_keys=True, indent=1))
    logger.info(f"Checkpoint written to {path} ({len(model.policy_params)} policy parameters)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[GaussianPolicy, ValueFunction, ValueFunction]:
    """
    Raises:
        ConfigurationError: unreadable file, unknown version or inconsistent sizes
    """
    path = Path(path)
    try:
        model = CheckpointModel.model_validate_json(path.read_text())
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"cannot load checkpoint {path}: {e}", key='checkpoint') from e
    if model.version != Config.CHECKPOINT_VERSION:
        raise ConfigurationError(f"checkpoint version {model.version} is not supported", key='checkpoint.version')

    normalizer = None
    if model.normalizer is not None:
        normalizer = ObservationNormalizer(model.observation_size)
        normalizer.load(model.normalizer)
    try:
        policy_net = MLP([model.observation_size, *model.hidden_sizes, model.action_size])
        value_net = MLP([model.observation_size, *model.hidden_sizes, 1])
        policy = GaussianPolicy(policy_net, np.asarray(model.policy_params), np.asarray(model.action_scale),
                                normalizer, model.learn_log_std)
        reward_value = ValueFunction(value_net, np.asarray(model.reward_value_params), normalizer)
        cost_value = ValueFunction(value_net, np.asarray(model.cost_value_params), normalizer)
    except ContractViolation as e:
        raise ConfigurationError(f"checkpoint {path} is inconsistent: {e}", key=e.field) from e
    if reward_value.params.shape != (value_net.n_params,) or cost_value.params.shape != (value_net.n_params,):
        raise ConfigurationError(f"checkpoint {path} has wrong value-network size", key='value_params')
    return policy, reward_value, cost_value
