import argparse
import json
import logging
import sys
from pathlib import Path

from config import Config, load_experiment_config
from services.errors import ConfigurationError
from services.experiment_service import ExperimentService

# Configure logging
logging.basicConfig(level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
                    format='%(asctime)s %(levelname)s %(name)s: %(message)s')
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='fierl',
        description='Fault-estimation reinforcement learning: train, evaluate and compare input policies',
    )
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p):
        p.add_argument('--config', default=Config.EXPERIMENT_CONFIG, help='experiment config (JSON)')
        p.add_argument('--seed', type=int, default=None, help='override the config seed')
        p.add_argument('--out', default=None, help='output directory')
        return p

    common(sub.add_parser('train', help='train a policy with CPO'))

    evaluate = common(sub.add_parser('evaluate', help='evaluate a checkpoint or the tuned baseline'))
    evaluate.add_argument('--checkpoint', default=None, help='policy checkpoint (JSON)')
    evaluate.add_argument('--baseline', default=None, help='baseline spec written by tune-baseline')
    evaluate.add_argument('--episodes', type=int, default=None, help='override evaluation.episodes')

    common(sub.add_parser('tune-baseline', help='grid-tune the perturbed proportional controller'))

    sweep = common(sub.add_parser('sweep', help='train and evaluate across tracking thresholds'))
    sweep.add_argument('--thresholds', type=float, nargs='+', default=None, help='delta_y_max values')

    figures = common(sub.add_parser('emit-figures', help='write figure CSVs for one test episode'))
    figures.add_argument('--checkpoint', default=None, help='policy checkpoint (JSON)')
    figures.add_argument('--baseline', default=None, help='baseline spec written by tune-baseline')
    return parser


def _summary(result: dict) -> dict:
    """Printable subset of a service result."""
    skip = {'records', 'spec', 'metrics'}
    summary = {k: v for k, v in result.items() if k not in skip}
    if 'metrics' in result:
        metrics = result['metrics'].to_dict()
        summary['metrics'] = {k: v for k, v in metrics.items() if not isinstance(v, list)}
    if 'spec' in result:
        summary['spec'] = result['spec'].to_dict()
    return summary


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    updates = {}
    if args.seed is not None:
        updates['seed'] = args.seed
    if args.out is not None:
        updates['output_dir'] = args.out
    try:
        config = load_experiment_config(args.config).model_copy(update=updates)
        service = ExperimentService(config)
    except ConfigurationError as e:
        logger.error(f"Invalid configuration: {str(e)}")
        return 2
    out = Path(config.output_dir)

    if args.command == 'train':
        result = service.train(out)
    elif args.command == 'evaluate':
        result = service.evaluate(checkpoint=args.checkpoint, baseline=args.baseline,
                                  episodes=args.episodes, out_dir=out)
    elif args.command == 'tune-baseline':
        result = service.tune_baseline(out)
    elif args.command == 'sweep':
        result = service.sweep_tracking_threshold(args.thresholds, out)
    else:
        result = service.emit_figures(checkpoint=args.checkpoint, baseline=args.baseline, out_dir=out)

    print(json.dumps(_summary(result), indent=2, sort_keys=True, default=str))
    return 0 if result.get('success') else 1


if __name__ == '__main__':
    sys.exit(main())
