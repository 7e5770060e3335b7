from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from forgerydet.config import STAGES, RunConfig, load_run_config, settings
from forgerydet.core.errors import EXIT_IO, EXIT_NUMERIC, EXIT_OK, ForgeryDetError, UsageError

logging.basicConfig(level=getattr(logging, settings.log_level.upper(), logging.INFO))
logger = logging.getLogger(__name__)


def _global_options() -> argparse.ArgumentParser:
  common = argparse.ArgumentParser(add_help=False)
  common.add_argument('--config', default=argparse.SUPPRESS, help='flat "key = value" run configuration file')
  common.add_argument('--seed', type=int, default=argparse.SUPPRESS)
  common.add_argument('--out', default=argparse.SUPPRESS, help='run output directory')
  common.add_argument('--set', dest='overrides', action='append', default=argparse.SUPPRESS, metavar='KEY=VALUE',
                      help='override one configuration key (repeatable)')
  return common


def parse_global_args() -> argparse.ArgumentParser:
  common = _global_options()
  parser = argparse.ArgumentParser(prog='forgerydet', description='Dual-branch face forgery detector', parents=[common])
  sub = parser.add_subparsers(dest='command', required=True)

  p_synth = sub.add_parser('synth', parents=[common], help='Generate the synthetic corpus and its manifest')
  p_synth.add_argument('--n', type=int)
  p_synth.add_argument('--mix')
  p_synth.add_argument('--workers', type=int)

  p_train = sub.add_parser('train', parents=[common], help='Run one training stage (or all three)')
  p_train.add_argument('--stage', required=True, choices=list(STAGES) + ['all'])

  p_infer = sub.add_parser('infer', parents=[common], help='Score an image or every sample of a manifest')
  p_infer.add_argument('--image', help='single image path; default is the configured manifest')
  p_infer.add_argument('--split', choices=['train', 'val', 'test'])

  p_eval = sub.add_parser('eval', parents=[common], help='Score a labeled manifest and write metric reports')
  p_eval.add_argument('--split', default='test', choices=['train', 'val', 'test', 'all'])

  p_inspect = sub.add_parser('inspect', parents=[common], help='Write gate, confidence and adaLoG inspection artifacts')
  p_inspect.add_argument('--split', default='test', choices=['train', 'val', 'test', 'all'])
  p_inspect.add_argument('--sample', action='append', help='sample id to render maps for (repeatable)')

  p_grad = sub.add_parser('gradcheck', parents=[common], help='Finite-difference check of the analytic gradients')
  p_grad.add_argument('--target', required=True, choices=['adalog', 'moe', 'ctx_heads', 'fusion', 'all'])

  return parser


def _overrides(ns: argparse.Namespace) -> Dict[str, Any]:
  values: Dict[str, Any] = {}
  for item in getattr(ns, 'overrides', None) or []:
    key, sep, value = item.partition('=')
    if not sep or not key.strip():
      raise UsageError(f'--set expects KEY=VALUE, got {item!r}')
    values[key.strip()] = value.strip()
  for key in ('seed', 'out', 'n', 'mix', 'workers'):
    if getattr(ns, key, None) is not None:
      values[key] = getattr(ns, key)
  return values


def build_config(ns: argparse.Namespace) -> RunConfig:
  return load_run_config(getattr(ns, 'config', None), _overrides(ns))


def build_events(config: RunConfig):
  from forgerydet.logging.event_logger import EventLogger
  return EventLogger(config.output_dir() / 'logs', enabled=settings.events_enabled)


def _split(value: Optional[str]) -> Optional[str]:
  return None if value in (None, 'all') else value


def cmd_synth(config: RunConfig) -> int:
  from forgerydet.data.synth import generate_corpus
  events = build_events(config)
  root = config.corpus_path()
  samples = generate_corpus(config.corpus_spec(), root, workers=config.workers)
  events.log_event('synth', 'corpus generated', {'root': str(root), 'n': len(samples), 'mix': config.mix})
  print(json.dumps({'corpus': str(root), 'manifest': str(root / 'manifest.jsonl'), 'samples': len(samples)}, indent=2))
  return EXIT_OK


def cmd_train(config: RunConfig, stage: str) -> int:
  from forgerydet.training.stages import StageRunner
  runner = StageRunner(config, events=build_events(config))
  results = runner.run_all() if stage == 'all' else [runner.run(stage)]
  payload = [
    {
      'stage': result.stage,
      'checkpoint': str(result.checkpoint),
      'initial_loss': result.record.initial_loss,
      'final_loss': result.record.final_loss,
      'steps': result.record.steps
    }
    for result in results
  ]
  print(json.dumps({'stages': payload}, indent=2))
  return EXIT_OK


def cmd_infer(config: RunConfig, image: Optional[str], split: Optional[str]) -> int:
  from forgerydet.pipeline.bundle import load_detector
  from forgerydet.pipeline.inference import load_inputs, run_inference
  from forgerydet.reports.generator import write_jsonl
  events = build_events(config)
  bundle = load_detector(config)
  prepared = load_inputs(config, image=image, split=split)
  result = run_inference(bundle, prepared, labeled=image is None, events=events)
  target = write_jsonl(config.output_dir() / 'reports' / 'predictions.jsonl', result.records)
  print(json.dumps({'predictions': str(target), 'scored': len(result.table), 'failed': result.failures}, indent=2))
  return EXIT_OK


def cmd_eval(config: RunConfig, split: Optional[str]) -> int:
  from forgerydet.metrics.scoring import evaluate
  from forgerydet.pipeline.bundle import load_detector
  from forgerydet.pipeline.inference import load_inputs, run_inference
  from forgerydet.reports.generator import generate_eval_report, write_jsonl
  events = build_events(config)
  bundle = load_detector(config)
  result = run_inference(bundle, load_inputs(config, split=split), events=events)
  reports_dir = config.output_dir() / 'reports'
  write_jsonl(reports_dir / 'predictions.jsonl', result.records)
  summary: Dict[str, Any] = {'split': split or 'all', 'scored': len(result.table), 'failed': result.failures}
  for name, scored in (('fused', result.fused_set()), ('face', result.face_set())):
    report = evaluate(scored)
    artifacts = generate_eval_report(report, reports_dir, name=name)
    summary[name] = {'auc': report.auc, 'report': str(artifacts.table)}
  events.log_event('eval', 'reports written', summary)
  print(json.dumps(summary, indent=2))
  return EXIT_OK


def cmd_inspect(config: RunConfig, split: Optional[str], sample_ids: Optional[Sequence[str]]) -> int:
  from forgerydet.pipeline.bundle import load_detector
  from forgerydet.pipeline.inference import load_inputs, run_inference
  from forgerydet.pipeline.inspection import default_map_samples, write_sample_maps, write_score_tables
  events = build_events(config)
  bundle = load_detector(config)
  prepared = load_inputs(config, split=split)
  result = run_inference(bundle, prepared, events=events)
  out_dir = config.output_dir() / 'inspect'
  expert_names = bundle.face.moe[0].expert_names if bundle.face.moe else []
  summary = write_score_tables(result, expert_names, out_dir)
  if sample_ids:
    wanted = set(sample_ids)
    chosen = [item for item in prepared if item.ok and item.sample.id in wanted]
    missing = wanted - {item.sample.id for item in chosen}
    if missing:
      raise UsageError(f'unknown or unreadable sample ids: {sorted(missing)}')
  else:
    chosen = default_map_samples(prepared)
  maps: List[Path] = []
  for item in chosen:
    maps.extend(write_sample_maps(bundle.face, item, out_dir))
  print(json.dumps({
    'inspect': str(out_dir),
    'tables': [str(path) for path in summary.files],
    'maps': len(maps),
    'checks': summary.directional_checks()
  }, indent=2))
  return EXIT_OK


def cmd_gradcheck(config: RunConfig, target: str) -> int:
  from forgerydet.pipeline.verification import TARGETS, run_gradcheck
  targets = sorted(TARGETS) if target == 'all' else [target]
  passed = True
  for name in targets:
    report = run_gradcheck(name, seed=config.seed)
    for group in report.groups:
      status = 'ok' if group.passed else 'FAIL'
      print(f'{name}\t{group.group}\t{group.worst:.3e}\t{group.worst_absolute:.3e}\t{group.coordinates}\t{status}')
    passed = passed and report.passed
  return EXIT_OK if passed else EXIT_NUMERIC


def main(argv: Optional[Sequence[str]] = None) -> int:
  parser = parse_global_args()
  ns = parser.parse_args(argv)
  cmd = ns.command
  try:
    config = build_config(ns)
    if cmd == 'synth':
      return cmd_synth(config)
    if cmd == 'train':
      return cmd_train(config, ns.stage)
    if cmd == 'infer':
      return cmd_infer(config, ns.image, ns.split)
    if cmd == 'eval':
      return cmd_eval(config, _split(ns.split))
    if cmd == 'inspect':
      return cmd_inspect(config, _split(ns.split), ns.sample)
    if cmd == 'gradcheck':
      return cmd_gradcheck(config, ns.target)
  except ForgeryDetError as exc:
    logger.debug('Command %s failed', cmd, exc_info=True)
    print(f'error: {exc}', file=sys.stderr)
    return exc.exit_code
  except OSError as exc:
    print(f'error: {exc}', file=sys.stderr)
    return EXIT_IO
  return 1


if __name__ == '__main__':
  raise SystemExit(main())
