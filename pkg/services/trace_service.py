"""
Episode Trace Service

Runs single episodes against any controller and records everything needed to
replay them offline: agent inputs, applied inputs, outputs, reward and cost,
the fault belief and the true fault. Traces are exported as CSV, one file for
the full trace and one per figure panel (fault estimates, tracking, inputs).
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from config import Config
from services.env_service import FaultDiagnosisEnv
from services.errors import ContractViolation

logger = logging.getLogger(__name__)

# controller(observation, rng) -> action
Controller = Callable[[np.ndarray, np.random.Generator], np.ndarray]

FLOAT_FORMAT = '%.17g'


def episode_rngs(seed: int, *key: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent (env, actor) generators for one episode, addressed by its key."""
    env_seq, actor_seq = np.random.SeedSequence(seed, spawn_key=tuple(key)).spawn(2)
    return np.random.default_rng(env_seq), np.random.default_rng(actor_seq)


@dataclass
class EpisodeTrace:
    """Row k describes step k+1: the observation the action was chosen from and its outcome."""
    observations: np.ndarray
    actions: np.ndarray
    inputs: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    y: np.ndarray
    y_ref: np.ndarray
    mu_z: np.ndarray
    var_z: np.ndarray
    z_true: np.ndarray
    delta_y_max: float

    @property
    def length(self) -> int:
        return self.rewards.shape[0]

    def estimation_error(self) -> np.ndarray:
        return np.linalg.norm(self.mu_z - self.z_true, axis=1)

    def jump_steps(self) -> List[int]:
        """Row indices where the true fault differs from the previous row."""
        changed = np.any(self.z_true[1:] != self.z_true[:-1], axis=1)
        return [int(k) + 1 for k in np.flatnonzero(changed)]


def run_episode(env: FaultDiagnosisEnv, controller: Controller, env_rng: np.random.Generator,
                actor_rng: np.random.Generator, horizon: Optional[int] = None) -> EpisodeTrace:
    """
    Roll one episode to completion.

    Args:
        env: Environment
        controller: Maps the masked observation to an action
        env_rng: Randomness for the plant, faults and initial conditions
        actor_rng: Randomness for the controller
        horizon: Episode length override

    Returns:
        EpisodeTrace with one row per step
    """
    state, obs = env.reset(env_rng, horizon)
    rows: Dict[str, list] = {k: [] for k in ('observations', 'actions', 'inputs', 'rewards', 'costs',
                                             'y', 'y_ref', 'mu_z', 'var_z', 'z_true')}
    done = False
    while not done:
        action = np.asarray(controller(obs, actor_rng), dtype=float)
        rows['observations'].append(obs)
        rows['actions'].append(action)
        rows['inputs'].append(env.applied_input(state, action))
        state, obs, reward, cost, done = env.step(state, action, env_rng)
        rows['rewards'].append(reward)
        rows['costs'].append(cost)
        rows['y'].append(state.y)
        rows['y_ref'].append(state.y_ref)
        rows['mu_z'].append(state.belief.mu_z)
        rows['var_z'].append(np.diag(state.belief.sigma_z).copy())
        rows['z_true'].append(state.plant.z)
    arrays = {k: np.array(v, dtype=float) for k, v in rows.items()}
    return EpisodeTrace(delta_y_max=env.config.delta_y_max, **arrays)


def _columns(prefix: str, values: np.ndarray) -> Dict[str, np.ndarray]:
    return {f'{prefix}_{i}': values[:, i] for i in range(values.shape[1])}


def trace_frame(trace: EpisodeTrace) -> pd.DataFrame:
    """Full trace as a table; t runs from 1 to the episode length."""
    data = {'t': np.arange(1, trace.length + 1)}
    data.update(_columns('y', trace.y))
    data.update(_columns('y_ref', trace.y_ref))
    data.update(_columns('u', trace.inputs))
    data.update(_columns('action', trace.actions))
    data['reward'] = trace.rewards
    data['cost'] = trace.costs
    data.update(_columns('mu_z', trace.mu_z))
    data.update(_columns('var_z', trace.var_z))
    data.update(_columns('z_true', trace.z_true))
    data.update(_columns('obs', trace.observations))
    data['delta_y_max'] = np.full(trace.length, trace.delta_y_max)
    return pd.DataFrame(data)


def _block(frame: pd.DataFrame, prefix: str) -> np.ndarray:
    cols = []
    i = 0
    while f'{prefix}_{i}' in frame.columns:
        cols.append(f'{prefix}_{i}')
        i += 1
    return frame[cols].to_numpy(dtype=float) if cols else np.zeros((len(frame), 0))


def frame_to_trace(frame: pd.DataFrame) -> EpisodeTrace:
    missing = [c for c in ('t', 'reward', 'cost', 'delta_y_max', 'y_0', 'y_ref_0', 'u_0', 'action_0',
                           'mu_z_0', 'var_z_0', 'z_true_0', 'obs_0') if c not in frame.columns]
    if missing:
        raise ContractViolation(f"trace is missing columns: {', '.join(missing)}", field='trace')
    return EpisodeTrace(
        observations=_block(frame, 'obs'),
        actions=_block(frame, 'action'),
        inputs=_block(frame, 'u'),
        rewards=frame['reward'].to_numpy(dtype=float),
        costs=frame['cost'].to_numpy(dtype=float),
        y=_block(frame, 'y'),
        y_ref=_block(frame, 'y_ref'),
        mu_z=_block(frame, 'mu_z'),
        var_z=_block(frame, 'var_z'),
        z_true=_block(frame, 'z_true'),
        delta_y_max=float(frame['delta_y_max'].iloc[0]) if len(frame) else 0.0,
    )


def _require(frame: pd.DataFrame, columns: List[str], panel: str) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ContractViolation(f"{panel} panel needs missing columns: {', '.join(missing)}", field='trace')


def fault_panel(frame: pd.DataFrame, n_u: int) -> pd.DataFrame:
    """t, then per actuator: true fault, estimate mean, std and the +-1 std band."""
    needed = ['t'] + [f'{p}_{i}' for i in range(n_u) for p in ('z_true', 'mu_z', 'var_z')]
    _require(frame, needed, 'fault')
    panel = {'t': frame['t']}
    for i in range(n_u):
        std = np.sqrt(np.clip(frame[f'var_z_{i}'].to_numpy(dtype=float), 0.0, None))
        mean = frame[f'mu_z_{i}'].to_numpy(dtype=float)
        panel[f'z_true_{i}'] = frame[f'z_true_{i}']
        panel[f'mu_z_{i}'] = mean
        panel[f'std_z_{i}'] = std
        panel[f'lower_{i}'] = mean - std
        panel[f'upper_{i}'] = mean + std
    return pd.DataFrame(panel)


def tracking_panel(frame: pd.DataFrame, n_y: int) -> pd.DataFrame:
    """t, outputs, references, infinity-norm tracking error against its bound and the cost flag."""
    needed = ['t', 'cost', 'delta_y_max'] + [f'{p}_{i}' for i in range(n_y) for p in ('y', 'y_ref')]
    _require(frame, needed, 'tracking')
    y = frame[[f'y_{i}' for i in range(n_y)]].to_numpy(dtype=float)
    y_ref = frame[[f'y_ref_{i}' for i in range(n_y)]].to_numpy(dtype=float)
    panel = {'t': frame['t']}
    for i in range(n_y):
        panel[f'y_{i}'] = y[:, i]
        panel[f'y_ref_{i}'] = y_ref[:, i]
    panel['tracking_error'] = np.max(np.abs(y - y_ref), axis=1)
    panel['bound'] = frame['delta_y_max']
    panel['violation'] = frame['cost']
    return pd.DataFrame(panel)


def input_panel(frame: pd.DataFrame, n_u: int) -> pd.DataFrame:
    needed = ['t'] + [f'{p}_{i}' for i in range(n_u) for p in ('u', 'action')]
    _require(frame, needed, 'input')
    panel = {'t': frame['t']}
    for i in range(n_u):
        panel[f'u_{i}'] = frame[f'u_{i}']
        panel[f'action_{i}'] = frame[f'action_{i}']
    return pd.DataFrame(panel)


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    return path


def read_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, float_precision='round_trip')


def versioned_name(stem: str) -> str:
    return f"{stem}.v{Config.CSV_SCHEMA_VERSION}.csv"


def emit_episode_figure_data(trace: Union[EpisodeTrace, pd.DataFrame], out_dir: Union[str, Path],
                             prefix: str = 'episode') -> Dict[str, Path]:
    """
    Write the full trace plus one CSV per figure panel.

    Args:
        trace: Completed trace, or a trace table as produced by trace_frame
        out_dir: Target directory
        prefix: File name prefix

    Returns:
        Mapping panel name -> written path

    Raises:
        ContractViolation: listing the columns a panel needs but the trace lacks
    """
    frame = trace_frame(trace) if isinstance(trace, EpisodeTrace) else trace
    n_u = sum(1 for c in frame.columns if c.startswith('mu_z_'))
    n_y = sum(1 for c in frame.columns if c.startswith('y_ref_'))
    if n_u == 0 or n_y == 0:
        missing = [c for c, n in (('mu_z_0', n_u), ('y_ref_0', n_y)) if n == 0]
        raise ContractViolation(f"trace is missing columns: {', '.join(missing)}", field='trace')
    panels = {
        'fault': fault_panel(frame, n_u),
        'tracking': tracking_panel(frame, n_y),
        'input': input_panel(frame, n_u),
    }
    out_dir = Path(out_dir)
    written = {'trace': write_csv(frame, out_dir / versioned_name(f'{prefix}_trace'))}
    for name, panel in panels.items():
        written[name] = write_csv(panel, out_dir / versioned_name(f'{prefix}_{name}_panel'))
    logger.info(f"Figure data for {len(frame)} steps written to {out_dir}")
    return written


def parse_trace(path: Union[str, Path]) -> EpisodeTrace:
    return frame_to_trace(read_csv(path))
