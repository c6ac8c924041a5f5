"""
Experiment Service

Training, evaluation, baseline tuning, the tracking-threshold sweep and
figure-data export on top of the plant, observer, environment, policy and
CPO services.

Every episode draws its randomness from a SeedSequence addressed by
(stream, ...), so results depend only on the seed and the config, never on
the order in which episodes run.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from config import ExperimentConfig
from services.baseline_service import (BaselineController, BaselineSpec, load_baseline_spec,
                                       save_baseline_spec, tune_baseline, write_tuning_report)
from services.cpo_service import TrajectoryBatch, cpo_update, estimate_advantages, fit_values
from services.env_service import FaultDiagnosisEnv, unpack_observation
from services.errors import ConfigurationError, NumericalError
from services.observer_service import belief_frame
from services.plant_service import FaultProcess, LinearFaultPlant, default_three_tank, noise_factor, plant_from_config
from services.policy_service import GaussianPolicy, ValueFunction, load_checkpoint, save_checkpoint
from services.trace_service import (FLOAT_FORMAT, Controller, EpisodeTrace, emit_episode_figure_data,
                                    episode_rngs, run_episode, versioned_name, write_csv)

logger = logging.getLogger(__name__)

TRAIN_STREAM = 0
EVAL_STREAM = 1
INIT_STREAM = 2
# 3 is the baseline tuning stream
DRIFT_STREAM = 4
FIGURE_STREAM = 5


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class MetricsRecord:
    """
    Evaluation summary. Per-step figures are first averaged within each
    episode; the reported std is taken across episodes.
    """
    episodes: int
    steps: int
    mean_step_reward: Optional[float]
    std_step_reward: Optional[float]
    mean_step_cost: Optional[float]
    std_step_cost: Optional[float]
    mean_episode_cost: Optional[float]
    episode_violations: List[int] = field(default_factory=list)
    episode_mean_rewards: List[float] = field(default_factory=list)
    jump_events: int = 0
    jump_recoveries: int = 0
    jump_recovery_rate: Optional[float] = None
    empty: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_metrics(traces: List[EpisodeTrace], recovery_window: int = 30) -> MetricsRecord:
    """
    Summarize completed episodes.

    A jump counts as recovered when the fault-estimate error `recovery_window`
    steps after the jump is below the error at the jump; jumps too close to
    the episode end are not counted.
    """
    if not traces:
        return MetricsRecord(episodes=0, steps=0, mean_step_reward=None, std_step_reward=None,
                             mean_step_cost=None, std_step_cost=None, mean_episode_cost=None, empty=True)
    step_rewards = np.array([np.mean(t.rewards) for t in traces])
    step_costs = np.array([np.mean(t.costs) for t in traces])
    violations = [int(np.sum(t.costs)) for t in traces]
    events = recovered = 0
    for trace in traces:
        error = trace.estimation_error()
        for k in trace.jump_steps():
            if k + recovery_window < trace.length:
                events += 1
                recovered += int(error[k + recovery_window] < error[k])
    return MetricsRecord(
        episodes=len(traces),
        steps=int(sum(t.length for t in traces)),
        mean_step_reward=float(step_rewards.mean()),
        std_step_reward=float(step_rewards.std()),
        mean_step_cost=float(step_costs.mean()),
        std_step_cost=float(step_costs.std()),
        mean_episode_cost=float(np.mean(violations)),
        episode_violations=violations,
        episode_mean_rewards=step_rewards.tolist(),
        jump_events=events,
        jump_recoveries=recovered,
        jump_recovery_rate=recovered / events if events else None,
    )


def drift_violation_probability(plant: LinearFaultPlant, delta_y_max: float, rollouts: int,
                                horizon: int, seed: int, y_ref: Optional[np.ndarray] = None) -> float:
    """
    Fraction of zero-input rollouts from equilibrium whose output leaves the
    tracking band at least once within `horizon` steps (process and
    measurement noise only).
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(DRIFT_STREAM,)))
    y_ref = np.zeros(plant.n_y) if y_ref is None else y_ref
    w_factor = noise_factor(plant.sigma_w)
    v_factor = noise_factor(plant.sigma_v)
    x = np.zeros((rollouts, plant.n_x))
    violated = np.zeros(rollouts, dtype=bool)
    for _ in range(horizon):
        x = x @ plant.A.T + plant.mu_w + rng.standard_normal((rollouts, plant.n_x)) @ w_factor.T
        y = x @ plant.C.T + plant.mu_v + rng.standard_normal((rollouts, plant.n_y)) @ v_factor.T
        violated |= np.max(np.abs(y - y_ref), axis=1) > delta_y_max
    return float(violated.mean())


def policy_controller(policy: GaussianPolicy, deterministic: bool) -> Controller:
    def act(obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return policy.act(obs, rng, deterministic=deterministic)
    return act


class ExperimentService:
    def __init__(self, config: ExperimentConfig, plant: Optional[LinearFaultPlant] = None):
        self.config = config
        if plant is not None:
            self.plant = plant
        elif config.plant is not None:
            self.plant = plant_from_config(config.plant)
        else:
            self.plant = default_three_tank()
        self.env = FaultDiagnosisEnv(self.plant, config.episode)
        self.seed = config.seed

    # ------------------------------------------------------------------
    # agent construction and data collection

    def build_agent(self) -> Tuple[GaussianPolicy, ValueFunction, ValueFunction]:
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(INIT_STREAM,)))
        policy = GaussianPolicy.from_config(self.config.policy, self.env.observation_size,
                                            self.plant.u_min, self.plant.u_max, rng)
        reward_value = ValueFunction.from_config(self.config.policy, self.env.observation_size, rng, policy.normalizer)
        cost_value = ValueFunction.from_config(self.config.policy, self.env.observation_size, rng, policy.normalizer)
        return policy, reward_value, cost_value

    def collect(self, policy: GaussianPolicy, update: int, episodes: int) -> TrajectoryBatch:
        """Roll `episodes` training episodes with the stochastic policy."""
        controller = policy_controller(policy, deterministic=False)
        rollouts = []
        for e in range(episodes):
            env_rng, actor_rng = episode_rngs(self.seed, TRAIN_STREAM, update, e)
            trace = run_episode(self.env, controller, env_rng, actor_rng)
            rollouts.append({
                'observations': trace.observations,
                'actions': trace.actions,
                'log_probs': policy.log_prob(trace.observations, trace.actions),
                'rewards': trace.rewards,
                'costs': trace.costs,
            })
        return TrajectoryBatch.concatenate(rollouts)

    def evaluation_env(self) -> FaultDiagnosisEnv:
        cfg = self.config.evaluation
        jumps = FaultProcess(kind='jump', walk_mean=np.zeros(self.plant.n_u),
                             walk_covariance=np.zeros((self.plant.n_u, self.plant.n_u)),
                             dwell=cfg.dwell, max_dwell=cfg.max_dwell if cfg.max_dwell is not None else 2 * cfg.dwell)
        return self.env.with_faults(jumps)

    def check_policy(self, policy: GaussianPolicy) -> None:
        if policy.observation_size != self.env.observation_size or policy.action_size != self.plant.n_u:
            raise ConfigurationError(
                f"checkpoint expects observations of size {policy.observation_size} and {policy.action_size} "
                f"actions; plant gives {self.env.observation_size} and {self.plant.n_u}",
                key='checkpoint')

    def run_evaluation_episodes(self, controller: Controller, episodes: int,
                                stream: int = EVAL_STREAM) -> List[EpisodeTrace]:
        low, high = self.config.evaluation.horizon_range
        env = self.evaluation_env()
        traces = []
        for e in range(episodes):
            env_rng, actor_rng = episode_rngs(self.seed, stream, e)
            horizon = int(env_rng.integers(low, high + 1))
            traces.append(run_episode(env, controller, env_rng, actor_rng, horizon))
        return traces

    # ------------------------------------------------------------------
    # orchestration

    def train(self, out_dir: Union[str, Path, None] = None) -> Dict:
        """
        Collect, estimate advantages, update the policy, refit the values,
        update the observation normalizer; repeat.

        Returns:
            Dict with success flag, checkpoint and training-log paths and the
            per-update records; on a numerical failure the last good agent is
            checkpointed and success is False
        """
        out = Path(out_dir or self.config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        training, episode_cfg = self.config.training, self.config.episode
        log_path = out / 'training_log.jsonl'
        records: List[dict] = []
        policy, reward_value, cost_value = self.build_agent()
        last_good = self._snapshot(policy, reward_value, cost_value)

        try:
            with log_path.open('w') as log_file:
                for update in range(training.updates):
                    batch = self.collect(policy, update, training.episodes_per_update)
                    batch = estimate_advantages(batch, reward_value, cost_value, episode_cfg.gamma,
                                                episode_cfg.gamma_c, self.config.cpo.gae_lambda)
                    policy, diagnostics = cpo_update(batch, policy, self.config.cpo, episode_cfg.cost_limit,
                                                     episode_cfg.gamma_c, episode_cfg.gamma)
                    reward_value, cost_value, value_info = fit_values(batch, reward_value, cost_value, self.config.cpo)
                    if policy.normalizer is not None:
                        policy.normalizer.update(batch.observations)
                    if not np.all(np.isfinite(policy.params)):
                        raise NumericalError("policy parameters became non-finite", diagnostics={'update': update})

                    record = {
                        'update': update,
                        'mean_step_reward': float(np.mean(batch.rewards)),
                        'mean_episode_cost': batch.cost_return_mean(1.0),
                        **diagnostics.to_record(),
                        **value_info,
                    }
                    records.append(record)
                    log_file.write(json.dumps(record, sort_keys=True) + '\n')
                    logger.info(f"Update {update}: reward/step={record['mean_step_reward']:.5f} "
                                f"cost/episode={record['mean_episode_cost']:.2f} kl={record['kl']:.2e} "
                                f"step={record['step_type']}")
                    last_good = self._snapshot(policy, reward_value, cost_value)
                    if (update + 1) % training.checkpoint_every == 0:
                        save_checkpoint(out / 'checkpoints' / f'update_{update + 1:05d}.json',
                                        policy, reward_value, cost_value)

            checkpoint = save_checkpoint(out / 'policy.json', policy, reward_value, cost_value)
            return {
                'success': True,
                'checkpoint': str(checkpoint),
                'training_log': str(log_path),
                'updates': len(records),
                'records': records,
                'training_curve': [r['mean_step_reward'] for r in records],
                'timestamp': _timestamp(),
            }
        except NumericalError as e:
            logger.error(f"Training aborted at update {len(records)}: {str(e)}")
            checkpoint = save_checkpoint(out / 'last_good.json', *self._restore(last_good))
            return {
                'success': False,
                'error': str(e),
                'diagnostics': e.diagnostics,
                'checkpoint': str(checkpoint),
                'training_log': str(log_path),
                'updates': len(records),
                'records': records,
                'timestamp': _timestamp(),
            }
        except Exception as e:
            logger.error(f"Error during training: {str(e)}")
            return {'success': False, 'error': str(e), 'records': records, 'timestamp': _timestamp()}

    @staticmethod
    def _snapshot(policy: GaussianPolicy, reward_value: ValueFunction, cost_value: ValueFunction) -> dict:
        return {
            'policy': policy.with_params(policy.params),
            'reward_value': reward_value.params.copy(),
            'cost_value': cost_value.params.copy(),
            'normalizer': policy.normalizer.state() if policy.normalizer is not None else None,
            'value_net': reward_value.net,
        }

    @staticmethod
    def _restore(snapshot: dict) -> Tuple[GaussianPolicy, ValueFunction, ValueFunction]:
        policy = snapshot['policy']
        if policy.normalizer is not None and snapshot['normalizer'] is not None:
            policy.normalizer.load(snapshot['normalizer'])
        net = snapshot['value_net']
        return (policy, ValueFunction(net, snapshot['reward_value'], policy.normalizer),
                ValueFunction(net, snapshot['cost_value'], policy.normalizer))

    def _controller(self, checkpoint: Union[str, Path, None], policy: Optional[GaussianPolicy],
                    baseline: Union[str, Path, BaselineSpec, None]) -> Tuple[Controller, str]:
        if baseline is not None:
            spec = baseline if isinstance(baseline, BaselineSpec) else load_baseline_spec(baseline)
            return BaselineController(spec, self.plant), 'baseline'
        if policy is None:
            if checkpoint is None:
                raise ConfigurationError("evaluation needs a checkpoint, a policy or a baseline spec", key='checkpoint')
            policy, _, _ = load_checkpoint(checkpoint)
        self.check_policy(policy)
        return policy_controller(policy.frozen_copy(), self.config.evaluation.deterministic), 'policy'

    def evaluate(self, checkpoint: Union[str, Path, None] = None, policy: Optional[GaussianPolicy] = None,
                 baseline: Union[str, Path, BaselineSpec, None] = None, episodes: Optional[int] = None,
                 out_dir: Union[str, Path, None] = None) -> Dict:
        """
        Score a trained policy (mean action unless configured otherwise) or a
        baseline spec on jump-fault episodes of random length.

        Returns:
            Dict with success flag and the MetricsRecord as 'metrics'
        """
        try:
            controller, kind = self._controller(checkpoint, policy, baseline)
            episodes = self.config.evaluation.episodes if episodes is None else episodes
            traces = self.run_evaluation_episodes(controller, episodes)
            metrics = aggregate_metrics(traces, self.config.evaluation.recovery_window)
            if metrics.empty:
                logger.warning("Evaluation ran zero episodes")
            else:
                logger.info(f"Evaluated {kind} on {metrics.episodes} episodes: "
                            f"reward/step={metrics.mean_step_reward:.5f}+-{metrics.std_step_reward:.5f}, "
                            f"cost/step={metrics.mean_step_cost:.4f}+-{metrics.std_step_cost:.4f}")
            result = {'success': True, 'controller': kind, 'metrics': metrics, 'timestamp': _timestamp()}
            if out_dir is not None:
                result['files'] = self._write_evaluation(metrics, traces, Path(out_dir), kind)
            return result
        except Exception as e:
            logger.error(f"Error during evaluation: {str(e)}")
            return {'success': False, 'error': str(e), 'timestamp': _timestamp()}

    def _write_evaluation(self, metrics: MetricsRecord, traces: List[EpisodeTrace], out: Path, kind: str) -> Dict[str, str]:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / f'{kind}_metrics.json'
        metrics_path.write_text(json.dumps(metrics.to_dict(), sort_keys=True, indent=1))
        frame = pd.DataFrame({
            'episode': np.arange(len(traces)),
            'horizon': [t.length for t in traces],
            'mean_step_reward': metrics.episode_mean_rewards,
            'violations': metrics.episode_violations,
        })
        episodes_path = out / versioned_name(f'{kind}_episodes')
        frame.to_csv(episodes_path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
        return {'metrics': str(metrics_path), 'episodes': str(episodes_path)}

    def tune_baseline(self, out_dir: Union[str, Path, None] = None) -> Dict:
        """Grid-tune the perturbed proportional controller on the training episode distribution."""
        try:
            out = Path(out_dir or self.config.output_dir)
            result = tune_baseline(self.env, self.config.baseline, self.config.episode.cost_limit, self.seed)
            report_path = write_tuning_report(result.report, out / versioned_name('baseline_tuning'))
            spec_path = save_baseline_spec(out / 'baseline_spec.json', result.spec, result.feasible)
            logger.info(f"Selected baseline k={result.spec.gain_scale}, K_p={result.spec.perturbation} "
                        f"(feasible={result.feasible})")
            return {
                'success': True,
                'spec': result.spec,
                'feasible': result.feasible,
                'report': str(report_path),
                'spec_path': str(spec_path),
                'timestamp': _timestamp(),
            }
        except Exception as e:
            logger.error(f"Error tuning baseline: {str(e)}")
            return {'success': False, 'error': str(e), 'timestamp': _timestamp()}

    def sweep_tracking_threshold(self, thresholds: Optional[List[float]] = None,
                                 out_dir: Union[str, Path, None] = None) -> Dict:
        """
        Train and evaluate one policy per tracking threshold and estimate the
        drift-only violation probability for each.

        A failed threshold is recorded with its error and the sweep moves on.
        """
        sweep = self.config.sweep
        thresholds = sweep.thresholds if thresholds is None else thresholds
        if not thresholds:
            return {'success': False, 'error': 'threshold list is empty', 'timestamp': _timestamp()}
        out = Path(out_dir or self.config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows, summary = [], []
        horizon = self.config.evaluation.horizon_range[1]

        for threshold in thresholds:
            sub_dir = out / f'threshold_{threshold:g}'
            drift = drift_violation_probability(self.plant, threshold, sweep.drift_rollouts, horizon, self.seed)
            sub_config = self.config.model_copy(deep=True, update={
                'episode': self.config.episode.model_copy(update={'delta_y_max': threshold}),
                'training': self.config.training.model_copy(update={
                    'updates': sweep.updates, 'episodes_per_update': sweep.episodes_per_update}),
            })
            service = ExperimentService(sub_config, plant=self.plant)
            trained = service.train(sub_dir)
            if not trained['success']:
                logger.error(f"Sweep threshold {threshold} failed: {trained['error']}")
                summary.append({'threshold': threshold, 'status': 'failed', 'error': trained['error'],
                                'drift_probability': drift})
                continue
            evaluated = service.evaluate(checkpoint=trained['checkpoint'], episodes=sweep.evaluation_episodes)
            if not evaluated['success']:
                summary.append({'threshold': threshold, 'status': 'failed', 'error': evaluated['error'],
                                'drift_probability': drift})
                continue
            metrics: MetricsRecord = evaluated['metrics']
            for e, (reward, violations) in enumerate(zip(metrics.episode_mean_rewards, metrics.episode_violations)):
                rows.append({'threshold': threshold, 'episode': e, 'mean_step_reward': reward,
                             'violations': violations, 'drift_probability': drift})
            summary.append({'threshold': threshold, 'status': 'ok', 'mean_step_reward': metrics.mean_step_reward,
                            'mean_episode_cost': metrics.mean_episode_cost, 'drift_probability': drift})
            logger.info(f"Threshold {threshold}: reward/step={metrics.mean_step_reward}, drift p={drift:.4f}")

        columns = ['threshold', 'episode', 'mean_step_reward', 'violations', 'drift_probability']
        csv_path = out / versioned_name('threshold_sweep')
        pd.DataFrame(rows, columns=columns).to_csv(csv_path, index=False, float_format=FLOAT_FORMAT,
                                                   lineterminator='\n')
        return {
            'success': any(s['status'] == 'ok' for s in summary),
            'summary': summary,
            'csv': str(csv_path),
            'timestamp': _timestamp(),
        }

    def emit_figures(self, checkpoint: Union[str, Path, None] = None, policy: Optional[GaussianPolicy] = None,
                     baseline: Union[str, Path, BaselineSpec, None] = None,
                     out_dir: Union[str, Path, None] = None) -> Dict:
        """Run one jump-fault test episode and write its figure panels."""
        try:
            controller, kind = self._controller(checkpoint, policy, baseline)
            trace = self.run_evaluation_episodes(controller, 1, stream=FIGURE_STREAM)[0]
            out = Path(out_dir or self.config.output_dir)
            files = emit_episode_figure_data(trace, out, prefix=f'{kind}_episode')
            beliefs = [unpack_observation(obs, self.plant.n_x, self.plant.n_u, self.plant.n_y)[0]
                       for obs in trace.observations]
            files['belief'] = write_csv(belief_frame(beliefs), out / versioned_name(f'{kind}_episode_belief'))
            return {'success': True, 'files': {k: str(v) for k, v in files.items()}, 'timestamp': _timestamp()}
        except Exception as e:
            logger.error(f"Error emitting figure data: {str(e)}")
            return {'success': False, 'error': str(e), 'timestamp': _timestamp()}
