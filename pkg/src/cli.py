"""
Command line surface of BridgePure.

    python bridgepure.py [--verbose] [--seed N] [--device cpu|cuda] <subcommand> ...

Subcommands map one-to-one onto library operations: gen-data, protect,
harvest, train, purify, evaluate, experiment, report. Library code raises;
this module turns exceptions into exit codes (0 ok, 1 runtime failure,
2 configuration error) and, for experiments, a failures.json manifest.
"""
import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import pandas as pd

from config import derive_seed, get_device, load_environment, load_json_file, parse_fraction
from errors import BridgePureError, ConfigurationError
from eval_harness import EvalConfig, image_fidelity, train_and_score
from experiment import ExperimentConfig, run_experiment
from imagesets import generate_synthetic, load_image_folder, save_image_folder
from metrics import summarize
from pairing import harvest_leakage, read_archive, verify_archive, write_archive
from plots import write_plots
from protections import (Preprocess, ProtectionKind, ProtectionSpec, check_budget, preprocess_dataset,
                         protect_dataset, protection_id)
from sampler import SamplerConfig, purify_dataset
from score_model import TrainConfig, fit, load_checkpoint

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def fraction(value):
    """argparse type for values like 8/255."""
    try:
        return parse_fraction(value)
    except ConfigurationError as e:
        raise argparse.ArgumentTypeError(str(e))


def int_list(value):
    try:
        return [int(v) for v in value.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {value!r}")


def _fmt(value, spec='.2f'):
    return 'n/a' if value is None else format(value, spec)


def banner(title):
    print("=" * 70)
    print(title)
    print("=" * 70)


# --- Config loading with overrides ----------------------------------------

def _assign(data, dotted, raw):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = dotted.split('.')
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"--set {dotted}: '{part}' is not an object", key=part)
    node[parts[-1]] = value


def load_config_with_overrides(cls, path, overrides=(), **top_level):
    """Read a JSON config, apply --set key=value and explicit flag overrides, then validate."""
    if path:
        data, key_lines = load_json_file(path)
    else:
        data, key_lines = {}, {}
    for item in overrides:
        if '=' not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split('=', 1)
        _assign(data, key.strip(), raw)
    for key, value in top_level.items():
        if value is not None:
            data[key] = value
    return cls.from_dict(data, key_lines)


def _spec_from_args(args):
    """A ProtectionSpec from --spec (kind name or JSON file) and optional flags."""
    if args.spec.endswith('.json'):
        return load_config_with_overrides(ProtectionSpec, args.spec)
    try:
        data = {'kind': ProtectionKind(args.spec).value}
    except ValueError:
        raise ConfigurationError(f"unknown protection kind {args.spec!r}", key='spec')
    if args.epsilon is not None:
        data['epsilon'] = args.epsilon
    if args.class_count is not None:
        data['class_count'] = args.class_count
    if args.pattern_seed is not None:
        data['pattern_seed'] = args.pattern_seed
    return ProtectionSpec.from_dict(data)


# --- Subcommands -----------------------------------------------------------

def cmd_gen_data(args):
    dataset = generate_synthetic(args.n, image_size=args.image_size, classes=args.classes,
                                 seed=args.seed, channels=args.channels)
    save_image_folder(dataset, args.out)
    print(f"✅ {len(dataset)} images written to {args.out}")
    return EXIT_OK


def cmd_protect(args):
    spec = _spec_from_args(args)
    dataset = load_image_folder(args.input)
    protected = protect_dataset(spec, dataset)
    over = 0
    measured = []
    for image_id, clean, prot in zip(dataset.ids, dataset.images, protected.images):
        value, ok = check_budget(spec, clean, prot, image_id)
        measured.append(value)
        over += not ok
    save_image_folder(protected, args.out)
    stats = summarize(measured)
    print(f"✅ Protected {len(protected)} images with {protection_id(spec)} -> {args.out}")
    print(f"   measured {spec.norm.value}: mean {stats['mean']:.4f}, max {stats['max']:.4f}, "
          f"budget {spec.epsilon:.4f}")
    if over:
        print(f"❌ {over} images exceed the budget")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_harvest(args):
    spec = _spec_from_args(args)
    reference = load_image_folder(args.reference)
    archive = harvest_leakage(spec, reference, n=args.n, seed=derive_seed(args.seed, 'harvest'),
                              class_filter=args.class_filter, per_class=args.per_class)
    write_archive(archive, args.out, overwrite=args.overwrite)
    print(f"✅ {len(archive)} pairs -> {args.out} (manifest {archive.manifest_hash[:12]})")
    if args.verify:
        bad = verify_archive(archive)
        if bad:
            print(f"❌ {len(bad)} archived images differ from a fresh protection call")
            return EXIT_FAILURE
        print("✅ Archive verified against the protection service")
    return EXIT_OK


def cmd_train(args):
    overrides = {'steps': args.steps, 'batch_size': args.batch_size, 'network': args.network,
                 'seed': derive_seed(args.seed, 'train')}
    cfg = load_config_with_overrides(TrainConfig, args.config, args.set, **overrides)
    if args.mode:
        cfg = dataclasses.replace(cfg, schedule=dataclasses.replace(cfg.schedule, mode=args.mode))
    archive = read_archive(args.archive)
    pp = Preprocess(beta=args.beta, seed=derive_seed(args.seed, 'preprocess'))
    end = preprocess_dataset(pp, archive.protected, archive.ids)
    model = fit((archive.clean, end), cfg, checkpoint_dir=args.out, device=get_device(args.device))
    print(f"✅ Model written to {Path(args.out) / 'model.bpck'} ({model.param_count:,} parameters, "
          f"final loss {model.history[-1]:.5f})")
    return EXIT_OK


def cmd_purify(args):
    overrides = {'steps': args.steps, 's': args.s, 'guidance': args.guidance,
                 'seed': derive_seed(args.seed, 'purify')}
    cfg = load_config_with_overrides(SamplerConfig, args.config, args.set, **overrides)
    model = load_checkpoint(args.model, device=get_device(args.device))
    dataset = load_image_folder(args.input)
    pp = Preprocess(beta=args.beta, seed=derive_seed(args.seed, 'preprocess'))
    inputs = preprocess_dataset(pp, dataset.images, dataset.ids)
    result = purify_dataset(model, dataset, cfg, batch_size=args.batch_size, inputs=inputs)
    save_image_folder(result.images, args.out)
    print(f"✅ {len(result.images)} purified images -> {args.out}")
    if result.faults:
        faults = [{'image_id': f.image_id, 'step_index': f.step_index, 'message': str(f)} for f in result.faults]
        (Path(args.out) / 'failures.json').write_text(json.dumps(faults, indent=2, sort_keys=True) + '\n')
        print(f"❌ {len(faults)} images could not be purified (see failures.json)")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_evaluate(args):
    overrides = {'trials': args.trials, 'epochs': args.epochs, 'classifier': args.classifier,
                 'seed': derive_seed(args.seed, 'evaluate')}
    cfg = load_config_with_overrides(EvalConfig, args.config, args.set, **overrides)
    train_set = load_image_folder(args.train)
    test_set = load_image_folder(args.test)
    report = train_and_score(train_set, test_set, cfg, device=get_device(args.device))
    result = {'evaluation': report.to_dict()}
    if args.reference:
        fidelity = image_fidelity(load_image_folder(args.reference), train_set)
        result['fidelity'] = {'psnr': summarize(fidelity.table['psnr']), 'ssim': summarize(fidelity.table['ssim'])}
    banner(f"📊 Accuracy: {_fmt(report.accuracy_mean)}%"
           + (f" ± {_fmt(report.accuracy_std)}" if report.accuracy_std is not None else '')
           + f" over {len(report.trial_accuracies)} trials")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + '\n')
    return EXIT_OK if not report.failed_trials else EXIT_FAILURE


def _print_plan(plan):
    banner(f"Stage plan ({len(plan)} stages)")
    for row in plan:
        marker = '♻️ ' if row['cached'] else '▶️ '
        print(f"{marker} {row['stage']:<28} {row['label']}")


def print_summary(report):
    banner(f"📊 {report['experiment']} ({report['config_hash'][:12]})")
    clean = report['baselines'].get('clean')
    if clean:
        print(f"  clean                     {_fmt(clean['accuracy_mean'], '6.2f')}%")
    for pid, entry in sorted(report['baselines']['protected'].items()):
        if entry:
            print(f"  protected {pid:<15} {_fmt(entry['accuracy_mean'], '6.2f')}%")
    if report['grid']:
        grid = pd.DataFrame(report['grid'])
        cols = ['n_pairs', 'schedule', 's', 'beta', 'accuracy_mean', 'psnr_mean', 'ssim_mean', 'is_best']
        print()
        print(grid[cols].to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    partial = report.get('partial_leakage')
    if partial:
        for run in partial['runs']:
            imp = run['improvement']
            print(f"\n  partial leakage: leaked +{_fmt(imp['leaked'], '.1f')}, "
                  f"non-leaked +{_fmt(imp['non_leaked'], '.1f')}, gap {_fmt(run['gap'], '.1f')}")
    for d in report.get('dilution', []):
        print(f"\n  dilution +{d['n_extra']} clean ({d.get('train_size') or 'n/a'} images): "
              f"{_fmt(d['accuracy_mean'])}%")
    if report['failures']:
        print(f"\n❌ {len(report['failures'])} failed stages")


def cmd_experiment(args):
    top = {'seed': args.seed if args.seed_given else None, 'name': args.name,
           'output_dir': str(args.run_dir) if args.run_dir else None}
    exp = load_config_with_overrides(ExperimentConfig, args.config, args.set, **top)
    result = run_experiment(exp, run_dir=args.run_dir, dry_run=args.dry_run, device=args.device)
    if args.dry_run:
        _print_plan(result.plan)
        return EXIT_OK
    print_summary(result.report)
    if result.failures:
        (result.run_dir / 'failures.json').write_text(
            json.dumps(result.failures, indent=2, sort_keys=True) + '\n')
        return EXIT_FAILURE
    (result.run_dir / 'failures.json').unlink(missing_ok=True)
    return EXIT_OK


def cmd_report(args):
    run_dir = Path(args.run)
    report_file = run_dir / 'report.json'
    if not report_file.exists():
        raise ConfigurationError(f"{run_dir}: report.json not found")
    report = json.loads(report_file.read_text(encoding='utf-8'))
    grid = pd.read_parquet(run_dir / 'tables' / 'grid.parquet')
    fidelity = pd.read_parquet(run_dir / 'tables' / 'fidelity.parquet')
    if not args.no_plots:
        write_plots(report, grid, fidelity, run_dir / 'plots')
    print_summary(report)
    return EXIT_OK if not report['failures'] else EXIT_FAILURE


# --- Parser ------------------------------------------------------------------

def _add_spec_flags(p):
    p.add_argument('--spec', required=True, help="protection kind (classwise-linf, one-pixel, patch-l2, mixture) "
                                                 "or a ProtectionSpec JSON file")
    p.add_argument('--epsilon', type=fraction, help="budget, fractions allowed (8/255)")
    p.add_argument('--class-count', type=int)
    p.add_argument('--pattern-seed', type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog='bridgepure', description='Protection-leakage purification toolkit')
    parser.add_argument('--verbose', '-v', action='store_true', help='debug logging')
    parser.add_argument('--seed', type=int, default=None, help='global seed (default 0)')
    parser.add_argument('--device', default=None, help='torch device (default: BRIDGEPURE_DEVICE or auto)')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='generate the synthetic shapes dataset as a PNG folder')
    p.add_argument('--out', required=True)
    p.add_argument('--n', type=int, default=7000)
    p.add_argument('--image-size', type=int, default=32)
    p.add_argument('--classes', type=int, default=10)
    p.add_argument('--channels', type=int, default=3, choices=[1, 3])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser('protect', help='apply a protection to a PNG folder')
    _add_spec_flags(p)
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser('harvest', help='query the protection on reference images into a PairArchive')
    _add_spec_flags(p)
    p.add_argument('--reference', required=True)
    p.add_argument('--n', type=int)
    p.add_argument('--class-filter', type=int_list)
    p.add_argument('--per-class', type=int)
    p.add_argument('--out', required=True)
    p.add_argument('--overwrite', action='store_true')
    p.add_argument('--verify', action='store_true', help='re-protect and compare after writing')
    p.set_defaults(func=cmd_harvest)

    p = sub.add_parser('train', help='train a bridge denoiser on a PairArchive')
    p.add_argument('--archive', required=True)
    p.add_argument('--config', help='TrainConfig JSON')
    p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
    p.add_argument('--steps', type=int)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--network', choices=['unet', 'mlp'])
    p.add_argument('--mode', choices=['ve', 'vp'])
    p.add_argument('--beta', type=fraction, default=0.0)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('purify', help='purify a protected PNG folder with a trained model')
    p.add_argument('--model', required=True)
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--config', help='SamplerConfig JSON')
    p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
    p.add_argument('--steps', type=int)
    p.add_argument('--s', type=fraction)
    p.add_argument('--guidance', type=fraction)
    p.add_argument('--beta', type=fraction, default=0.0)
    p.add_argument('--batch-size', type=int, default=64)
    p.set_defaults(func=cmd_purify)

    p = sub.add_parser('evaluate', help='train classifiers on a folder and score them on a test folder')
    p.add_argument('--train', required=True)
    p.add_argument('--test', required=True)
    p.add_argument('--reference', help='clean folder aligned with --train for PSNR/SSIM')
    p.add_argument('--config', help='EvalConfig JSON')
    p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
    p.add_argument('--trials', type=int)
    p.add_argument('--epochs', type=int)
    p.add_argument('--classifier', choices=['resnet', 'resnet-small', 'linear-probe'])
    p.add_argument('--out', help='write the evaluation JSON here')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('experiment', help='run a full experiment from one config file')
    p.add_argument('--config', required=True)
    p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
    p.add_argument('--name')
    p.add_argument('--run-dir', type=Path)
    p.add_argument('--dry-run', action='store_true', help='print the stage plan and exit')
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser('report', help='re-render plots and print the summary of a run')
    p.add_argument('--run', required=True)
    p.add_argument('--no-plots', action='store_true')
    p.set_defaults(func=cmd_report)
    return parser


def cli_run(argv=None):
    """Parse argv, run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK

    load_environment()
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.INFO)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0

    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BridgePureError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return EXIT_FAILURE


def main():
    sys.exit(cli_run())
