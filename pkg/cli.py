#!/usr/bin/env python3
"""
Command line entry point.

    trajmask synth    -o stops.jsonl [--agents N --days D --profile P]
    trajmask ingest   INPUT -o stops.jsonl [--pois pois.jsonl]
    trajmask pretrain --data stops.jsonl -o run/ [--steps N ...]
    trajmask eval     --checkpoint run/checkpoint.gmtm --data stops.jsonl[:LABEL] ... [--tasks id,fd,random,goal]
    trajmask inspect  run/checkpoint.gmtm

Every subcommand accepts --seed, --workers and --config. Settings resolve as
CLI flag > config file > default; a run manifest can be passed as --config to
replay a run. Exit codes: 0 success, 1 runtime or data failure, 2 usage error.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from analysis import write_plots
from config import (
    BaseConfig, ERROR_MESSAGES, EXIT_CODES, LossConfig, MaskParams, ModelConfig,
    StaypointConfig, TrainConfig, config_from_dict, get_config, load_config_file, resolve_settings,
)
from core_types import PoiVocab
from errors import ConfigError, EmptyDataset, FormatError, TrajmaskError
from evaluation import render_grouped_report, run_tasks, write_report
from ingest import (
    dataset_windows, detect_file_schema, load_ping_file, load_poi_table, load_stop_file, stops_from_pings, write_stop_file,
)
from logging_config import log_error, setup_logging
from masking import parse_tasks
from model import checkpoint_digest, encode_windows, load_checkpoint, read_checkpoint_header
from synthgen import ScenarioConfig, generate
from train import pretrain, split_agents
from utils import write_json

logger = logging.getLogger(__name__)

SPLITS = ('train', 'heldout', 'all')


def _task_list(value: str) -> List[str]:
    try:
        return [task.value for task in parse_tasks(value)]
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _field_defaults(cls, exclude: Sequence[str] = ()) -> Dict[str, Any]:
    return {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in exclude}


def synth_defaults() -> Dict[str, Any]:
    defaults = _field_defaults(ScenarioConfig, exclude=('poi_map',))
    defaults['workers'] = BaseConfig.DEFAULT_WORKERS
    return defaults


def ingest_defaults() -> Dict[str, Any]:
    defaults = _field_defaults(StaypointConfig)
    defaults['workers'] = BaseConfig.DEFAULT_WORKERS
    return defaults


def pretrain_defaults() -> Dict[str, Any]:
    defaults = {}
    defaults.update(_field_defaults(ModelConfig, exclude=('vocab_size', 'd_detail')))
    defaults.update(_field_defaults(LossConfig))
    defaults.update(_field_defaults(TrainConfig))
    defaults.update(_field_defaults(MaskParams))
    defaults['seed'] = BaseConfig.DEFAULT_SEED
    defaults.update({'split': 'train', 'split_seed': 0, 'workers': BaseConfig.DEFAULT_WORKERS})
    return defaults


def eval_defaults() -> Dict[str, Any]:
    defaults = _field_defaults(MaskParams)
    defaults.update({
        'seed': BaseConfig.DEFAULT_SEED,
        'batch_size': 64,
        'holdout_fraction': TrainConfig().holdout_fraction,
        'split': 'heldout',
        'split_seed': 0,
        'tasks': ['id', 'fd', 'random', 'goal'],
        'workers': BaseConfig.DEFAULT_WORKERS,
    })
    return defaults


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='Random seed')
    common.add_argument('--workers', type=int, help='Parallel workers for data and inference sections')
    common.add_argument('--config', help='JSON config file or run manifest')
    common.add_argument('--log-level', dest='log_level', help='Logging level (default from TRAJMASK_LOG_LEVEL)')

    parser = argparse.ArgumentParser(prog=BaseConfig.APP_NAME, description="Masked trajectory modeling toolkit")
    parser.add_argument('--version', action='version', version=f"%(prog)s {BaseConfig.VERSION}")
    subparsers = parser.add_subparsers(dest='command', required=True)

    synth_parser = subparsers.add_parser('synth', parents=[common], help='Generate a synthetic stop-point dataset')
    synth_parser.add_argument('-o', '--output', required=True, help='Stop-point file to write')
    synth_parser.add_argument('--agents', dest='n_agents', type=int, help='Number of agents')
    synth_parser.add_argument('--days', dest='n_days', type=int, help='Days per agent')
    synth_parser.add_argument('--noise', dest='schedule_noise_min', type=float, help='Schedule noise in minutes')
    synth_parser.add_argument('--skip-prob', dest='skip_prob', type=float, help='Probability of skipping an optional activity')
    synth_parser.add_argument('--profile', help='Scenario profile (combined, hunger, interest, social, work)')
    synth_parser.add_argument('--plots', help='Directory for dataset summary charts')

    ingest_parser = subparsers.add_parser('ingest', parents=[common], help='Convert pings or stops into a canonical stop file')
    ingest_parser.add_argument('input', help='Ping or stop JSON-lines file (schema auto-detected)')
    ingest_parser.add_argument('-o', '--output', required=True, help='Canonical stop file to write')
    ingest_parser.add_argument('--pois', help='POI table (JSON lines: lat, lon, category); required for ping input')
    ingest_parser.add_argument('--dist-threshold', dest='dist_threshold_m', type=float, help='Staypoint distance threshold in meters')
    ingest_parser.add_argument('--time-threshold', dest='time_threshold_s', type=float, help='Staypoint time threshold in seconds')
    ingest_parser.add_argument('--plots', help='Directory for dataset summary charts')

    pretrain_parser = subparsers.add_parser('pretrain', parents=[common], help='Masked pretraining')
    pretrain_parser.add_argument('--data', required=True, help='Canonical stop file')
    pretrain_parser.add_argument('-o', '--output-dir', dest='output_dir', required=True, help='Run directory')
    pretrain_parser.add_argument('--steps', type=int)
    pretrain_parser.add_argument('--batch-size', dest='batch_size', type=int)
    pretrain_parser.add_argument('--lr', dest='learning_rate', type=float)
    pretrain_parser.add_argument('--weight-decay', dest='weight_decay', type=float)
    pretrain_parser.add_argument('--layers', dest='n_layers', type=int)
    pretrain_parser.add_argument('--d-model', dest='d_model', type=int)
    pretrain_parser.add_argument('--heads', dest='n_heads', type=int)
    pretrain_parser.add_argument('--dropout', dest='dropout_p', type=float)
    pretrain_parser.add_argument('--max-len', dest='max_len', type=int, help='Window length L')
    pretrain_parser.add_argument('--alpha', type=float, help='Focal weighting')
    pretrain_parser.add_argument('--gamma', type=float, help='Focal focusing')
    pretrain_parser.add_argument('--lam', type=float, help='Regression loss weight')
    pretrain_parser.add_argument('--mask-ratio-range', dest='pretrain_ratio_range', type=float, nargs=2, metavar=('LOW', 'HIGH'))
    pretrain_parser.add_argument('--checkpoint-every', dest='checkpoint_every', type=int)
    pretrain_parser.add_argument('--log-every', dest='log_every', type=int)
    pretrain_parser.add_argument('--holdout-fraction', dest='holdout_fraction', type=float)
    pretrain_parser.add_argument('--split', choices=SPLITS, help='Agents to train on (default train)')
    pretrain_parser.add_argument('--split-seed', dest='split_seed', type=int)

    eval_parser = subparsers.add_parser('eval', parents=[common], help='Run downstream tasks against a checkpoint')
    eval_parser.add_argument('--checkpoint', required=True)
    eval_parser.add_argument('--data', required=True, action='append', metavar='FILE[:LABEL]',
                             help='Canonical stop file, optionally labeled; repeat for one report line per file')
    eval_parser.add_argument('--tasks', type=_task_list, help='Comma separated tasks: id,fd,random,goal')
    eval_parser.add_argument('-o', '--output-dir', dest='output_dir', help='Directory for report.txt and report.jsonl')
    eval_parser.add_argument('--name', help='Report label for a single --data file (default: file stem)')
    eval_parser.add_argument('--batch-size', dest='batch_size', type=int)
    eval_parser.add_argument('--random-ratio', dest='random_ratio', type=float)
    eval_parser.add_argument('--holdout-fraction', dest='holdout_fraction', type=float)
    eval_parser.add_argument('--split', choices=SPLITS, help='Agents to evaluate on (default heldout)')
    eval_parser.add_argument('--split-seed', dest='split_seed', type=int)

    inspect_parser = subparsers.add_parser('inspect', parents=[common], help='Print a checkpoint header')
    inspect_parser.add_argument('checkpoint')

    for sub in (synth_parser, ingest_parser, pretrain_parser, eval_parser, inspect_parser):
        sub.set_defaults(format_usage=sub.format_usage)

    return parser


def _settings(args: argparse.Namespace, defaults: Mapping[str, Any]) -> Dict[str, Any]:
    cli = {key: getattr(args, key, None) for key in defaults}
    file_settings = load_config_file(args.config)
    settings = resolve_settings(cli, file_settings, defaults)
    if isinstance(settings.get('pretrain_ratio_range'), list):
        settings['pretrain_ratio_range'] = tuple(settings['pretrain_ratio_range'])
    return settings


def write_manifest(
    artifact: str,
    command: str,
    settings: Mapping[str, Any],
    inputs: Mapping[str, Optional[str]],
    outputs: Mapping[str, str],
    started: float,
    extra: Optional[Mapping[str, Any]] = None
) -> str:
    """Write <artifact>.manifest.json describing how the artifact was produced."""
    manifest = {
        'subcommand': command,
        'config': {k: list(v) if isinstance(v, tuple) else v for k, v in settings.items()},
        'seed': settings.get('seed'),
        'inputs': dict(inputs),
        'outputs': dict(outputs),
        'version': BaseConfig.VERSION,
        'duration_s': round(time.time() - started, 3),
    }
    manifest.update(extra or {})
    path = artifact + BaseConfig.MANIFEST_SUFFIX
    write_json(path, manifest)
    logger.info(f"Wrote run manifest {path}")
    return path


def _select_agents(dataset, settings: Mapping[str, Any]):
    if settings['split'] == 'all':
        return dataset
    train_ids, heldout_ids = split_agents(dataset.agent_ids, settings['holdout_fraction'], settings['split_seed'])
    chosen = train_ids if settings['split'] == 'train' else heldout_ids
    logger.info(f"Using {settings['split']} split: {len(chosen)} of {len(dataset.agent_ids)} agents")
    return dataset.subset(chosen)


def cmd_synth(args: argparse.Namespace) -> int:
    started = time.time()
    settings = _settings(args, synth_defaults())
    cfg = config_from_dict(ScenarioConfig, settings)
    dataset = generate(cfg, path=args.output, workers=settings['workers'])
    if args.plots:
        write_plots(dataset, args.plots)
    write_manifest(args.output, 'synth', settings, {}, {'stops': args.output}, started)
    return EXIT_CODES['OK']


def cmd_ingest(args: argparse.Namespace) -> int:
    started = time.time()
    settings = _settings(args, ingest_defaults())
    schema = detect_file_schema(args.input)
    if schema == 'ping':
        if not args.pois:
            raise ConfigError(ERROR_MESSAGES['MISSING_POIS'])
        staypoints = config_from_dict(StaypointConfig, settings)
        dataset = stops_from_pings(load_ping_file(args.input), load_poi_table(args.pois), staypoints, settings['workers'])
    else:
        dataset = load_stop_file(args.input)

    write_stop_file(args.output, dataset)
    meta_path = args.output + '.meta.json'
    write_json(meta_path, {
        'vocab': dataset.vocab.to_dict(),
        'vocab_fingerprint': dataset.vocab.fingerprint(),
        'norm_stats': dataset.stats.to_dict(),
        'schema': schema,
    })
    if args.plots:
        write_plots(dataset, args.plots)
    write_manifest(
        args.output, 'ingest', settings,
        {'input': args.input, 'pois': args.pois},
        {'stops': args.output, 'meta': meta_path},
        started,
    )
    return EXIT_CODES['OK']


def cmd_pretrain(args: argparse.Namespace) -> int:
    started = time.time()
    settings = _settings(args, pretrain_defaults())
    dataset = load_stop_file(args.data)
    model_cfg = config_from_dict(ModelConfig, {**settings, 'vocab_size': dataset.vocab.size})
    loss_cfg = config_from_dict(LossConfig, settings)
    train_cfg = config_from_dict(TrainConfig, settings)
    mask_params = config_from_dict(MaskParams, settings)

    windows = dataset_windows(_select_agents(dataset, settings), model_cfg.max_len)
    if not windows:
        raise EmptyDataset(ERROR_MESSAGES['EMPTY_DATASET'])
    encoded = encode_windows(windows, dataset.vocab, dataset.stats, model_cfg.max_len)
    logger.info(f"Pretraining on {len(encoded)} windows of up to {model_cfg.max_len} stops")

    os.makedirs(args.output_dir, exist_ok=True)
    result = pretrain(encoded, dataset.vocab, dataset.stats, model_cfg, loss_cfg, train_cfg, mask_params, args.output_dir)
    checkpoint_path = result.checkpoints[-1]
    write_manifest(
        checkpoint_path, 'pretrain', settings,
        {'data': args.data},
        {
            'checkpoint': checkpoint_path,
            'loss_trace': os.path.join(args.output_dir, BaseConfig.LOSS_TRACE_NAME),
        },
        started,
        {'checkpoint_digest': checkpoint_digest(checkpoint_path), 'vocab_fingerprint': dataset.vocab.fingerprint()},
    )
    return EXIT_CODES['OK']


def parse_data_inputs(values: Sequence[str], name: Optional[str] = None) -> List[Tuple[str, str]]:
    """
    Split eval --data values into (path, label) pairs.

    A value is FILE or FILE:LABEL. Without a label the file stem is used,
    or --name when a single file is given. Labels must be unique.
    """
    if name and len(values) > 1:
        raise ConfigError("--name applies to a single --data file; use FILE:LABEL to label several")
    inputs = []
    for value in values:
        path, sep, label = value.rpartition(':')
        if not sep or not path or os.sep in label:
            path, label = value, ''
        label = label or name or os.path.splitext(os.path.basename(path))[0]
        inputs.append((path, label))
    labels = [label for _, label in inputs]
    duplicates = sorted({label for label in labels if labels.count(label) > 1})
    if duplicates:
        raise ConfigError(f"duplicate report labels: {', '.join(duplicates)}")
    return inputs


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.time()
    settings = _settings(args, eval_defaults())
    tasks = settings['tasks']
    tasks = parse_tasks(tasks if isinstance(tasks, str) else ','.join(tasks))
    settings['tasks'] = [task.value for task in tasks]
    inputs = parse_data_inputs(args.data, args.name)

    checkpoint = load_checkpoint(args.checkpoint)
    mask_params = config_from_dict(MaskParams, settings)
    groups = []
    for path, label in inputs:
        dataset = _select_agents(load_stop_file(path), settings)
        logger.info(f"Evaluating '{label}' from {path}")
        rows = run_tasks(checkpoint, dataset, tasks, settings['seed'], settings['batch_size'], mask_params, settings['workers'])
        groups.append((label, rows))

    if args.output_dir:
        table_path = os.path.join(args.output_dir, BaseConfig.REPORT_TABLE_NAME)
        jsonl_path = os.path.join(args.output_dir, BaseConfig.REPORT_JSONL_NAME)
        table = write_report(groups, table_path, jsonl_path)
        write_manifest(
            jsonl_path, 'eval', settings,
            {'checkpoint': args.checkpoint, 'data': {label: path for path, label in inputs}},
            {'table': table_path, 'report': jsonl_path},
            started,
            {'checkpoint_digest': checkpoint_digest(args.checkpoint)},
        )
    else:
        table, _ = render_grouped_report(groups)
    print(table, end='')
    return EXIT_CODES['OK']


def cmd_inspect(args: argparse.Namespace) -> int:
    with open(args.checkpoint, 'rb') as f:
        header, payload_start = read_checkpoint_header(f.read())
    try:
        header['vocab_fingerprint'] = PoiVocab.from_dict(header['vocab']).fingerprint()
    except (TrajmaskError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"invalid header metadata: {e}") from e
    header['payload_offset'] = payload_start
    header['sha256'] = checkpoint_digest(args.checkpoint)
    print(json.dumps(header, indent=2, sort_keys=True))
    return EXIT_CODES['OK']


COMMANDS = {
    'synth': cmd_synth,
    'ingest': cmd_ingest,
    'pretrain': cmd_pretrain,
    'eval': cmd_eval,
    'inspect': cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    app_config = get_config()
    setup_logging(
        level=(args.log_level or os.getenv('TRAJMASK_LOG_LEVEL', app_config.LOG_LEVEL)).upper(),
        log_dir=os.getenv('TRAJMASK_LOG_DIR', app_config.LOG_DIR),
        json_logs=app_config.JSON_LOGS,
    )

    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        # invalid flag or config values are usage errors, like argparse's own
        log_error(logger, e, f"{args.command} rejected its settings")
        print(args.format_usage(), end='', file=sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CODES['USAGE']
    except (TrajmaskError, OSError) as e:
        log_error(logger, e, f"{args.command} failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CODES['FAILURE']


if __name__ == '__main__':
    sys.exit(main())
