#!/usr/bin/env python3

import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Sequence, Tuple

import numpy as np

from backends import build_components, uses_oracle
from config import Config, ConfigError
from core import ContractViolation, LabelMap, ValidationError
from engine import Engine, EngineResult
from flow import write_flow
from metrics import evaluate_sequence, format_table
from oracles import GroundTruth, flow_name
from sequence_io import (
    atomic_write_text,
    load_label_map,
    load_masks,
    load_sequence,
    save_frames,
    save_masks,
    save_overlays,
    write_prob_map,
)
from synthetic import SpecValidationError, SyntheticSpec, generate, occlusion_scene

log = logging.getLogger('main')

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONTRACT = 2

PRESETS = {
    'occlusion': lambda: occlusion_scene(occluded=True),
    'unoccluded': lambda: occlusion_scene(occluded=False),
}


def parse_log_level(level):
    match level:
        case 'DEBUG':
            return logging.DEBUG
        case 'INFO':
            return logging.INFO
        case 'WARNING':
            return logging.WARNING
        case 'ERROR':
            return logging.ERROR
        case 'CRITICAL':
            return logging.CRITICAL
        case _:
            return None


def write_json(path: str, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + '\n')


def first_masks_from_labels(labels: LabelMap) -> List[np.ndarray]:
    """Splits an indexed first-frame mask into one binary map per label 1..K."""
    present = sorted(int(label) for label in np.unique(labels) if label > 0)
    if not present:
        raise ValidationError('The first-frame mask contains no labelled instance')
    expected = list(range(1, present[-1] + 1))
    if present != expected:
        missing = sorted(set(expected) - set(present))
        raise ValidationError(f'Instance labels must be contiguous from 1; missing {missing}')
    return [(labels == k).astype(np.float32) for k in expected]


def load_spec(args) -> SyntheticSpec:
    if args.preset:
        return PRESETS[args.preset]()
    if not os.path.exists(args.spec):
        raise SpecValidationError(f'Scene file "{args.spec}" not found')
    with open(args.spec, encoding='utf-8') as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecValidationError(f'Scene file "{args.spec}" is not valid JSON: {exc}') from exc
    return SyntheticSpec.from_dict(data)


def cmd_synth(args) -> int:
    spec = load_spec(args)
    video = generate(spec, args.seed)
    out = args.out
    save_frames(video.sequence, os.path.join(out, 'frames'))
    save_masks(video.labels, os.path.join(out, 'gt'))
    for (i, j), field in sorted(video.flows.items()):
        write_flow(os.path.join(out, 'flow', flow_name(i, j)), field)
    write_json(os.path.join(out, 'spec.json'), {'seed': args.seed, 'scene': spec.to_dict()})
    log.info('Wrote %d frames with %d instances to %s', spec.num_frames, spec.num_instances, out)
    return EXIT_OK


def load_config(args) -> Config:
    config = Config.load(args.config) if args.config else Config()
    if not args.log_level:
        logging.getLogger().setLevel(parse_log_level(config.LOGLEVEL))
    return config.override(
        FRAMES_DIR=getattr(args, 'frames', None),
        FIRST_MASK=getattr(args, 'first_mask', None),
        OUTPUT_DIR=getattr(args, 'out', None),
    )


def load_inputs(config: Config):
    if not config.FRAMES_DIR:
        raise ConfigError('No frames directory given (--frames or FRAMES_DIR)')
    if not config.FIRST_MASK:
        raise ConfigError('No first-frame mask given (--first-mask or FIRST_MASK)')
    sequence = load_sequence(config.FRAMES_DIR)
    labels = load_label_map(config.FIRST_MASK)
    if labels.shape != sequence.shape:
        raise ValidationError(f'First-frame mask is {labels.shape}, frames are {sequence.shape}')
    truth = GroundTruth.from_directory(config.ORACLE_DIR) if config.ORACLE_DIR else None
    if truth is None and uses_oracle(config):
        raise ConfigError('Oracle backends need ORACLE_DIR pointing at a synth output directory')
    if truth is not None and truth.num_frames != len(sequence):
        raise ValidationError(f'Ground truth has {truth.num_frames} frames, the sequence has {len(sequence)}')
    return sequence, first_masks_from_labels(labels), truth


def execute(config: Config, sequence, first_masks, truth, **changes) -> EngineResult:
    engine_config = config.engine_config(**changes)
    engine = Engine(engine_config, build_components(config, truth))
    log.info('Running: reid=%s crop_mode=%s flow=%s refiner=%s proposals=%s',
             engine_config.reid_enabled, engine_config.crop_mode, engine_config.flow_backend,
             engine_config.refiner_backend, engine_config.proposal_backend)
    return engine.run(sequence, first_masks)


def cmd_run(args) -> int:
    config = load_config(args)
    if not config.OUTPUT_DIR:
        raise ConfigError('No output directory given (--out or OUTPUT_DIR)')
    sequence, first_masks, truth = load_inputs(config)
    result = execute(config, sequence, first_masks, truth)

    out = config.OUTPUT_DIR
    save_masks(result.labels, os.path.join(out, 'masks'))
    lines = ''.join(json.dumps(record.as_dict(), sort_keys=True) + '\n' for record in result.iterations)
    atomic_write_text(os.path.join(out, 'iterations.jsonl'), lines)
    if config.DUMP_PROBABILITIES:
        for i in range(result.probs.shape[0]):
            for k in range(result.probs.shape[1]):
                write_prob_map(os.path.join(out, 'probabilities', f'{i:05d}_{k + 1:02d}.vspm'), result.probs[i, k])
    if config.SAVE_OVERLAYS:
        save_overlays(sequence, result.labels, os.path.join(out, 'overlays'))
    write_json(os.path.join(out, 'run.json'), {
        'frames': len(sequence),
        'instances': len(first_masks),
        'iterations': len(result.iterations),
        'truncated': result.truncated,
        'config': config.as_dict(),
    })
    if result.truncated:
        log.warning('Iteration cap reached before the retrieval loop settled')
    log.info('Wrote %d label maps to %s', len(result.labels), out)
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = load_masks(args.pred)
    gt = load_masks(args.gt)
    evaluation = evaluate_sequence(pred, gt, tolerance=args.tolerance)
    table = format_table(evaluation)
    out = args.out or args.pred
    atomic_write_text(os.path.join(out, 'evaluation.txt'), table)
    write_json(os.path.join(out, 'evaluation.json'), evaluation.summary())
    sys.stdout.write(table)
    return EXIT_OK


def ablation_rows(config: Config, sequence, first_masks, truth, gt: Sequence[LabelMap],
                  tolerance: Optional[float], crop_modes: bool) -> List[Tuple[str, float, float, float]]:
    variants = [('propagation only', {'reid_enabled': False}), ('+ re-id', {'reid_enabled': True})]
    if crop_modes:
        variants += [
            ('+ re-id, full image', {'reid_enabled': True, 'crop_mode': 'full'}),
            ('+ re-id, object box', {'reid_enabled': True, 'crop_mode': 'box'}),
        ]
    rows = []
    for name, changes in variants:
        result = execute(config, sequence, first_masks, truth, **changes)
        evaluation = evaluate_sequence(result.labels, gt, tolerance=tolerance)
        rows.append((name, evaluation.j.mean, evaluation.f.mean, evaluation.global_mean))
    return rows


def format_ablation(rows: Sequence[Tuple[str, float, float, float]]) -> str:
    baseline = rows[0][3]
    lines = [f'{"Variant":<22} {"J Mean":>7} {"F Mean":>7} {"Global":>7} {"Boost":>7}']
    for name, j_mean, f_mean, overall in rows:
        lines.append(f'{name:<22} {j_mean:>7.3f} {f_mean:>7.3f} {overall:>7.3f} {overall - baseline:>+7.3f}')
    return '\n'.join(lines) + '\n'


def cmd_ablate(args) -> int:
    config = load_config(args)
    sequence, first_masks, truth = load_inputs(config)
    if args.gt:
        gt = load_masks(args.gt)
    elif truth is not None:
        gt = truth.labels
    else:
        raise ConfigError('Ablation needs ground truth (--gt or ORACLE_DIR)')

    rows = ablation_rows(config, sequence, first_masks, truth, gt, args.tolerance, args.crop_modes)
    table = format_ablation(rows)
    delta = rows[1][3] - rows[0][3]
    if config.OUTPUT_DIR:
        atomic_write_text(os.path.join(config.OUTPUT_DIR, 'ablation.txt'), table)
        write_json(os.path.join(config.OUTPUT_DIR, 'ablation.json'), {
            'rows': [
                {'variant': name, 'j_mean': j_mean, 'f_mean': f_mean, 'global_mean': overall}
                for name, j_mean, f_mean, overall in rows
            ],
            'reid_delta': delta,
            'config': config.as_dict(),
        })
    sys.stdout.write(table)
    sys.stdout.write(f'global mean without re-id {rows[0][3]:.3f}, with re-id {rows[1][3]:.3f}, delta {delta:+.3f}\n')
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='vosreid', description='Video object segmentation with re-identification')
    parser.add_argument('--log-level', default=None, help='overrides LOGLEVEL')
    sub = parser.add_subparsers(dest='command', required=True)

    synth = sub.add_parser('synth', help='render a synthetic scene with ground truth and flow')
    source = synth.add_mutually_exclusive_group(required=True)
    source.add_argument('--spec', help='JSON scene description')
    source.add_argument('--preset', choices=sorted(PRESETS), help='built-in scene')
    synth.add_argument('--seed', type=int, default=0)
    synth.add_argument('--out', required=True)
    synth.set_defaults(handler=cmd_synth)

    run = sub.add_parser('run', help='segment a sequence from its first-frame mask')
    run.add_argument('--frames')
    run.add_argument('--first-mask')
    run.add_argument('--config')
    run.add_argument('--out')
    run.set_defaults(handler=cmd_run)

    evaluate = sub.add_parser('eval', help='score predicted masks against ground truth')
    evaluate.add_argument('--pred', required=True)
    evaluate.add_argument('--gt', required=True)
    evaluate.add_argument('--tolerance', type=float, default=None)
    evaluate.add_argument('--out', default=None, help='directory for the table and summary (default: --pred)')
    evaluate.set_defaults(handler=cmd_eval)

    ablate = sub.add_parser('ablate', help='compare runs with and without re-identification')
    ablate.add_argument('--frames')
    ablate.add_argument('--first-mask')
    ablate.add_argument('--config')
    ablate.add_argument('--gt', default=None, help='ground-truth masks (default: ORACLE_DIR/gt)')
    ablate.add_argument('--tolerance', type=float, default=None)
    ablate.add_argument('--crop-modes', action='store_true', help='add full-image and object-box rows')
    ablate.add_argument('--out', default=None)
    ablate.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = args.log_level or os.environ.get('LOGLEVEL', 'INFO')
    if parse_log_level(level) is None:
        log.error('Unknown log level "%s"', level)
        return EXIT_VALIDATION
    logging.basicConfig(level=parse_log_level(level), stream=sys.stderr)

    try:
        return args.handler(args)
    except ValidationError as exc:
        log.error(str(exc))
        return EXIT_VALIDATION
    except ContractViolation as exc:
        log.error(str(exc))
        return EXIT_CONTRACT


if __name__ == '__main__':
    sys.exit(main())
