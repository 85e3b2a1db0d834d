import os
import sys
import dataclasses
import logging
import argparse
import tempfile
from typing import Any, Dict, List, Optional

import numpy as np

from src import __version__
from src.config import (SAMPLE_MODES, ACTIVATIONS, LR_SCHEDULES, SampleConfig, load_train_config, merge_overrides,
                        save_config, setup_logging)
from src.datasets import Normalizer, build_chunk_dataset, load_dataset, save_dataset
from src.error_handler import MeanFlowError, ConfigurationError, error_reporter, report_error, log_audit
from src.evaluation import SweepSpec, compare_methods, evaluate_field, run_sweep, task_records
from src.linalg import Rng
from src.meanflow import train
from src.nnet import load_checkpoint, save_checkpoint
from src.sampler import sample_batch
from src.tasks import TASK_TAGS
from src.utils import MANIFEST_NAME, RunManifest, ensure_dir, write_csv, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 3

CHECKPOINT_NAME = 'ckpt.json'
ERRORS_NAME = 'errors.json'
TRAIN_CONFIG_NAME = 'train_config.json'
TRAIN_FLAGS = ('flow_ratio', 'gamma', 'adaptive_c', 'steps', 'batch_size', 'learn_rate', 'lr_schedule', 'chunk_h',
               'activation', 'time_embed_dim')


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None, help='Master seed (default 0, or the config value)')
    common.add_argument('--out', default=None, help='Run directory (default runs/<command>)')
    common.add_argument('--config', default=None, help='TrainConfig JSON file')
    common.add_argument('--debug', action='store_true', help='Enable debug logging')
    common.add_argument('--log-file', default=None, help='Log file path')
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='meanflow-actions',
                                     description="One-step action-chunk generation with MeanFlow")
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)
    common = _common_flags()

    p = sub.add_parser('gen-data', parents=[common], help='Generate a demonstration dataset')
    p.add_argument('--task', required=True, choices=TASK_TAGS)
    p.add_argument('--episodes', type=_positive_int, default=100,
                   help='Expert episodes (gmm: number of samples)')
    p.add_argument('--modes', type=_positive_int, default=2, help='gmm mixture modes')
    p.add_argument('--ambiguity', type=float, default=0.5, help='gmm probability of an uninformative cond')
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser('train', parents=[common], help='Train a field on a dataset')
    p.add_argument('--data', required=True, help='Dataset directory')
    p.add_argument('--flow-ratio', type=float, default=None)
    p.add_argument('--gamma', type=float, default=None)
    p.add_argument('--adaptive-c', type=float, default=None)
    p.add_argument('--steps', type=_positive_int, default=None)
    p.add_argument('--batch-size', type=_positive_int, default=None)
    p.add_argument('--learn-rate', type=float, default=None)
    p.add_argument('--lr-schedule', choices=LR_SCHEDULES, default=None)
    p.add_argument('--chunk-h', type=_positive_int, default=None)
    p.add_argument('--time-embed-dim', type=int, default=None)
    p.add_argument('--activation', choices=ACTIVATIONS, default=None)
    p.add_argument('--progress', action='store_true', help='Show a progress bar')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('sample', parents=[common], help='Draw chunks for dataset observations')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--count', type=_positive_int, default=10, help='Number of observations to sample for')
    p.add_argument('--nfe', type=_positive_int, default=1)
    p.add_argument('--mode', choices=SAMPLE_MODES, default='meanflow')
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser('eval', parents=[common], help='Success rate and energy distance of a checkpoint')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--task', choices=TASK_TAGS, default=None, help='Default: the task the checkpoint was trained on')
    p.add_argument('--nfe', type=_positive_int, nargs='+', default=[1], help='One report row per value')
    p.add_argument('--mode', choices=SAMPLE_MODES, default='meanflow')
    p.add_argument('--rounds', type=_positive_int, default=10)
    p.add_argument('--trials', type=_positive_int, default=20)
    p.add_argument('--max-steps', type=_positive_int, default=400)
    p.add_argument('--holdout-episodes', type=_positive_int, default=20)
    p.add_argument('--reps', type=int, default=5, help='Timing repetitions')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('sweep', parents=[common], help='Run a sweep spec')
    p.add_argument('--spec', required=True, help='Sweep spec JSON file')
    p.add_argument('--progress', action='store_true')
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser('compare', parents=[common], help='MeanFlow nfe=1 against Euler FlowMatching')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--task', choices=TASK_TAGS, default=None)
    p.add_argument('--baseline-nfe', type=_positive_int, default=10)
    p.add_argument('--rounds', type=_positive_int, default=10)
    p.add_argument('--trials', type=_positive_int, default=20)
    p.add_argument('--holdout-episodes', type=_positive_int, default=20)
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser('replay', parents=[common], help='Re-run a manifest and compare checksums')
    p.add_argument('manifest', help='Manifest file or run directory')
    p.set_defaults(handler=cmd_replay)
    return parser


def _out_dir(args) -> str:
    return ensure_dir(args.out or os.path.join('runs', args.command))


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _manifest(args, argv: List[str], config: Dict[str, Any], seed: int) -> RunManifest:
    return RunManifest(command=args.command, argv=list(argv), config=config, seed=seed)


def _load_field(path: str):
    net, meta = load_checkpoint(path)
    return net, meta, Normalizer.from_dict(meta.get('normalizer'))


def _held_out(task: str, seed: int, count: int, meta: Dict[str, Any], normalizer):
    """Fresh demonstrations from a seed stream disjoint from the one gen-data uses"""
    records = task_records(task, Rng(seed).derive(1), count, meta.get('gmm_modes', 2), meta.get('gmm_ambiguity', 0.5))
    return build_chunk_dataset(records, meta.get('chunk_h', 1), normalize=False, normalizer=normalizer)


def cmd_gen_data(args, argv: List[str]) -> int:
    out = _out_dir(args)
    seed = _seed(args)
    generator = {'task': args.task, 'episodes': args.episodes, 'seed': seed}
    if args.task == 'gmm':
        generator.update(modes=args.modes, ambiguity=args.ambiguity)
    records = task_records(args.task, Rng(seed), args.episodes, args.modes, args.ambiguity)
    data_path, header_path = save_dataset(out, records, generator)

    manifest = _manifest(args, argv, generator, seed)
    manifest.add_artifact('dataset', data_path)
    manifest.add_artifact('dataset_header', header_path)
    manifest.write(out)
    steps = sum(len(r) for r in records)
    print(f"{args.task}: {len(records)} episodes, {steps} steps, "
          f"obs_dim={records[0].obs_dim}, act_dim={records[0].act_dim} -> {out}")
    return EXIT_OK


def cmd_train(args, argv: List[str]) -> int:
    out = _out_dir(args)
    records, header = load_dataset(args.data)
    cfg = load_train_config(args.config)
    overrides = {name: getattr(args, name) for name in TRAIN_FLAGS}
    overrides.update(seed=args.seed, act_dim=header.act_dim)
    if header.task_tag == 'gmm':
        overrides['chunk_h'] = 1
    cfg = merge_overrides(cfg, overrides)

    data = build_chunk_dataset(records, cfg.chunk_h, cfg.normalize)
    net, report = train(data, cfg, progress=args.progress)
    metadata = {
        'task': header.task_tag,
        'chunk_h': cfg.chunk_h,
        'act_dim': cfg.act_dim,
        'gmm_modes': header.generator.get('modes', 2),
        'gmm_ambiguity': header.generator.get('ambiguity', 0.5),
        'normalizer': data.normalizer.to_dict() if data.normalizer else None,
        'train_config': cfg.to_dict(),
    }
    ckpt_path = save_checkpoint(os.path.join(out, CHECKPOINT_NAME), net, metadata)
    log_audit("checkpoint_written", {'path': ckpt_path, 'checksum': report.checksum})
    paths = report.write(out)
    config_path = save_config(cfg, os.path.join(out, TRAIN_CONFIG_NAME))

    manifest = _manifest(args, argv, cfg.to_dict(), cfg.seed)
    manifest.add_artifact('checkpoint', ckpt_path)
    manifest.add_artifact('train_config', config_path)
    manifest.add_artifact('loss_csv', paths['loss_csv'])
    manifest.add_artifact('train_report', paths['train_report'])
    manifest.write(out)
    print(f"Trained {net!r} for {cfg.steps} steps: final loss {report.final_loss:.6f}, "
          f"checksum {report.checksum[:12]} -> {ckpt_path}")
    return EXIT_OK


def cmd_sample(args, argv: List[str]) -> int:
    out = _out_dir(args)
    seed = _seed(args)
    net, meta, normalizer = _load_field(args.ckpt)
    records, _ = load_dataset(args.data)
    obs = np.concatenate([r.observations for r in records], axis=0)[:args.count]
    cfg = SampleConfig(nfe=args.nfe, mode=args.mode, seed=seed).validate()
    flat = sample_batch(net, obs, cfg, Rng(seed))
    if normalizer is not None:
        flat = normalizer.inverse(flat)
    path = write_csv(os.path.join(out, 'samples.csv'), ['obs_index', *[f'a{k}' for k in range(flat.shape[1])]],
                     [(i, *[repr(float(v)) for v in row]) for i, row in enumerate(flat)])

    manifest = _manifest(args, argv, cfg.to_dict(), seed)
    manifest.add_artifact('samples', path)
    manifest.write(out)
    print(f"Sampled {flat.shape[0]} chunks ({args.mode}, nfe={args.nfe}) -> {path}")
    return EXIT_OK


def cmd_eval(args, argv: List[str]) -> int:
    out = _out_dir(args)
    seed = _seed(args)
    net, meta, normalizer = _load_field(args.ckpt)
    task = args.task or meta.get('task')
    if task not in TASK_TAGS:
        raise ConfigurationError(f"cannot tell which task to evaluate; pass --task ({', '.join(TASK_TAGS)})")
    held = _held_out(task, seed, args.holdout_episodes, meta, normalizer)

    rows = []
    for nfe in args.nfe:
        cfg = SampleConfig(nfe=nfe, mode=args.mode, seed=seed).validate()
        metrics = evaluate_field(net, task, cfg, held, seed, args.rounds, args.trials, args.max_steps,
                                 time_reps=args.reps)
        rows.append((nfe, args.mode, '' if metrics.success_pct is None else repr(metrics.success_pct),
                     repr(metrics.energy_distance), repr(metrics.gen_time_s)))
        print(f"{task} {args.mode} nfe={nfe}: success={metrics.success_pct}, "
              f"energy distance={metrics.energy_distance:.4f}")
    path = write_csv(os.path.join(out, 'report.csv'),
                     ['nfe', 'mode', 'success_pct', 'energy_distance', 'gen_time_s'], rows)

    manifest = _manifest(args, argv, {'task': task, 'nfe': args.nfe, 'mode': args.mode, 'rounds': args.rounds,
                                      'trials': args.trials, 'max_steps': args.max_steps,
                                      'holdout_episodes': args.holdout_episodes}, seed)
    manifest.add_artifact('report', path)
    manifest.write(out)
    return EXIT_OK


def cmd_sweep(args, argv: List[str]) -> int:
    out = _out_dir(args)
    spec = SweepSpec.load(args.spec)
    if args.config:
        spec = dataclasses.replace(spec, base=load_train_config(args.config)).validate()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seeds=[args.seed]).validate()
    report = run_sweep(spec, progress=args.progress)
    csv_path = report.write_csv(os.path.join(out, 'report.csv'))
    summary_path = report.write_summary(os.path.join(out, 'summary.json'))

    manifest = _manifest(args, argv, spec.to_dict(), spec.seeds[0])
    manifest.add_artifact('report', csv_path)
    manifest.add_artifact('summary', summary_path)
    manifest.write(out)
    failed = report.failed_cells
    print(f"Sweep over {spec.axis}: {len(report.cells)} cells, {len(failed)} failed -> {csv_path}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_compare(args, argv: List[str]) -> int:
    out = _out_dir(args)
    seed = _seed(args)
    net, meta, normalizer = _load_field(args.ckpt)
    task = args.task or meta.get('task')
    if task not in TASK_TAGS:
        raise ConfigurationError("cannot tell which task to compare on; pass --task")
    held = _held_out(task, seed, args.holdout_episodes, meta, normalizer)
    result = compare_methods(net, task, held, args.baseline_nfe, seed, args.rounds, args.trials)
    csv_path = write_csv(os.path.join(out, 'compare.csv'),
                         ['method', 'nfe', 'success_pct', 'energy_distance', 'gen_time_s'], result.rows())
    json_path = write_json(os.path.join(out, 'compare.json'), result.to_dict())

    manifest = _manifest(args, argv, {'task': task, 'baseline_nfe': args.baseline_nfe}, seed)
    manifest.add_artifact('compare_csv', csv_path)
    manifest.add_artifact('compare', json_path)
    manifest.write(out)
    if result.speed_ratio is not None:
        print(f"{task}: euler_fm nfe={args.baseline_nfe} takes {result.speed_ratio:.1f}x the time of meanflow nfe=1")
    return EXIT_OK


def _replace_out(argv: List[str], out: str) -> List[str]:
    replayed, skip = [], False
    for arg in argv:
        if skip:
            skip = False
            continue
        if arg == '--out':
            skip = True
            continue
        if arg.startswith('--out='):
            continue
        replayed.append(arg)
    return replayed + ['--out', out]


def cmd_replay(args, argv: List[str]) -> int:
    original = RunManifest.load(args.manifest)
    if original.command == 'replay':
        raise ConfigurationError("a replay manifest cannot be replayed")
    out = args.out or tempfile.mkdtemp(prefix='meanflow-replay-')
    replay_argv = _replace_out(original.argv, out)
    logger.info(f"Replaying '{original.command}' into {out}: {' '.join(replay_argv)}")
    code = main(replay_argv)
    if code not in (EXIT_OK, EXIT_PARTIAL):
        print(f"Replay of '{original.command}' failed with exit code {code}")
        return EXIT_ERROR
    fresh = RunManifest.load(os.path.join(out, MANIFEST_NAME))
    mismatched = original.compare(fresh)
    for name in mismatched:
        print(f"MISMATCH {name}: {original.checksums[name][:12]} != {fresh.checksums.get(name, 'missing')[:12]}")
    if mismatched:
        return EXIT_ERROR
    print(f"Replay reproduced {len(original.checksums)} artifact(s) of '{original.command}'")
    return EXIT_OK


def _export_errors(args):
    """Copy this run's error records next to its outputs when the run directory exists"""
    logger.debug(f"Error stats: {error_reporter.get_error_stats()}")
    if args.out and os.path.isdir(args.out):
        try:
            error_reporter.export_error_log(os.path.join(args.out, ERRORS_NAME))
        except MeanFlowError as e:
            logger.warning(str(e))


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)

    setup_logging(args.debug, args.log_file)
    logger.info(f"MeanFlowActions v{__version__}: {args.command}")
    logger.debug(f"Command line arguments: {argv}")

    error_reporter.clear_error_log()
    try:
        return args.handler(args, argv)
    except MeanFlowError as e:
        report_error(e, context={'command': args.command, 'argv': argv})
        _export_errors(args)
        return EXIT_ERROR
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
