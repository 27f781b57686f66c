"""
End-to-end BridgePure experiments with content-hash stage caching.

Stage graph: data -> protect -> harvest -> train -> purify -> evaluate.
Each stage lives in <run_dir>/stages/<name>-<key>/ where key hashes the
stage parameters together with the keys of its upstream stages, so a changed
beta re-runs training and purification while protection and harvesting are
served from the cache. A stage directory is only published (renamed from
*.partial and marked DONE) once its function returned successfully.

Run directory:
    config.json      resolved ExperimentConfig
    stages/          cached stage outputs
    tables/          grid.parquet, fidelity.parquet
    report.json      deterministic summary (no timings)
    plots/           html figures and matplotlib png copies
    timings.json     wall-clock seconds per executed stage
"""
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import pandas as pd

from bridge_math import ScheduleMode
from config import (config_hash, derive_seed, from_dict, get_device, get_runs_dir, load_json_file,
                    short_hash, to_plain)
from errors import ConfigurationError, StageFailure
from eval_harness import AUGMENTATIONS, EvalConfig, EvalReport, augmentation_baseline, image_fidelity, train_and_score
from imagesets import generate_synthetic, load_image_folder, read_imageset, write_imageset
from metrics import summarize
from pairing import dilute, harvest_leakage, make_splits, read_archive, write_archive
from plots import write_plots
from protections import Preprocess, ProtectionSpec, preprocess_dataset, protect_dataset, protection_id
from sampler import SamplerConfig, purify_dataset
from score_model import TrainConfig, fit, load_checkpoint

logger = logging.getLogger(__name__)


@dataclass
class DatasetConfig:
    source: str = 'synthetic'
    path: Optional[str] = None
    image_size: int = 32
    classes: int = 10
    channels: int = 3
    splits: List[int] = field(default_factory=lambda: [5000, 1000, 1000])
    noise: float = 0.03
    seed: Optional[int] = None

    def __post_init__(self):
        if self.source not in ('synthetic', 'folder'):
            raise ConfigurationError(f"dataset source must be 'synthetic' or 'folder', got {self.source!r}",
                                     key='source')
        if self.source == 'folder' and not self.path:
            raise ConfigurationError("folder datasets need a path", key='path')
        if len(self.splits) != 3:
            raise ConfigurationError("splits lists protect/reference/test sizes", key='splits')


@dataclass
class LeakageConfig:
    n_pairs: List[int] = field(default_factory=lambda: [500])
    class_filter: Optional[List[int]] = None
    per_class: Optional[int] = None
    dataset: Optional[DatasetConfig] = None

    def sizes(self):
        if self.per_class is not None:
            if self.class_filter is None:
                raise ConfigurationError("per_class leakage needs class_filter", key='per_class')
            return [self.per_class * len(self.class_filter)]
        return list(self.n_pairs)


@dataclass
class ExperimentConfig:
    name: str = 'bridgepure'
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    protection: ProtectionSpec = field(default_factory=ProtectionSpec)
    leakage: LeakageConfig = field(default_factory=LeakageConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    s_values: List[float] = field(default_factory=lambda: [0.33, 0.8])
    betas: List[float] = field(default_factory=lambda: [0.0, 0.02])
    schedule_modes: List[str] = field(default_factory=list)
    eval: EvalConfig = field(default_factory=EvalConfig)
    transfer_protections: List[ProtectionSpec] = field(default_factory=list)
    dilution_sizes: List[int] = field(default_factory=list)
    augmentations: List[str] = field(default_factory=list)
    purify_batch_size: int = 64
    output_dir: Optional[str] = None

    def __post_init__(self):
        if not self.s_values or any(not 0 <= s <= 1 for s in self.s_values):
            raise ConfigurationError("s_values must be non-empty and within [0, 1]", key='s_values')
        if not self.betas or any(not 0 <= b <= 1 for b in self.betas):
            raise ConfigurationError("betas must be non-empty and within [0, 1]", key='betas')
        for mode in self.schedule_modes:
            try:
                ScheduleMode(mode)
            except ValueError:
                raise ConfigurationError(f"unknown schedule mode {mode!r}", key='schedule_modes')
        for kind in self.augmentations:
            if kind not in AUGMENTATIONS:
                raise ConfigurationError(f"unknown augmentation {kind!r}", key='augmentations')
        if self.leakage.class_filter is not None:
            bad = [c for c in self.leakage.class_filter if not 0 <= c < self.protection.class_count]
            if bad:
                raise ConfigurationError(f"class_filter entries {bad} outside the label space", key='class_filter')
        self.leakage.sizes()

    @property
    def modes(self):
        return [ScheduleMode(m) for m in self.schedule_modes] or [self.train.schedule.mode]

    @classmethod
    def from_dict(cls, data, key_lines=None):
        return from_dict(cls, data, key_lines)

    def to_dict(self):
        return to_plain(self)

    def hash(self):
        return config_hash(self)


def load_experiment_config(path):
    data, key_lines = load_json_file(path)
    return ExperimentConfig.from_dict(data, key_lines)


# --- Stage machinery --------------------------------------------------------

@dataclass
class Stage:
    name: str
    label: str
    params: dict
    upstream: list
    fn: Callable = field(repr=False)
    key: str = ''

    def __post_init__(self):
        payload = {'name': self.name, 'params': to_plain(self.params), 'upstream': [u.key for u in self.upstream]}
        self.key = short_hash(payload, 16)

    @property
    def dirname(self):
        return f"{self.name}-{self.key}"


class StagePlan:
    """Ordered, de-duplicated list of stages."""

    def __init__(self, stages_dir):
        self.stages_dir = Path(stages_dir)
        self.stages = []
        self._by_key = {}

    def add(self, name, label, params, upstream, fn):
        stage = Stage(name, label, params, list(upstream), fn)
        if stage.key in self._by_key:
            return self._by_key[stage.key]
        self._by_key[stage.key] = stage
        self.stages.append(stage)
        return stage

    def path(self, stage):
        return self.stages_dir / stage.dirname

    def is_cached(self, stage):
        return (self.path(stage) / 'DONE').exists()

    def describe(self):
        rows = []
        for stage in self.stages:
            rows.append({
                'stage': stage.dirname,
                'label': stage.label,
                'upstream': [u.dirname for u in stage.upstream],
                'cached': self.is_cached(stage),
            })
        return rows

    def execute(self, timings):
        """Run every stage in order. Returns failures as dicts; never raises StageFailure."""
        failures = []
        failed_keys = set()
        for stage in self.stages:
            target = self.path(stage)
            if any(u.key in failed_keys for u in stage.upstream):
                failed_keys.add(stage.key)
                failures.append({'stage': stage.dirname, 'label': stage.label, 'error': 'upstream stage failed'})
                continue
            if self.is_cached(stage):
                logger.info(f"♻️  Cache hit: {stage.dirname} ({stage.label})")
                continue
            logger.info(f"▶️  Running {stage.dirname} ({stage.label})")
            partial = target.with_name(target.name + '.partial')
            if partial.exists():
                shutil.rmtree(partial)
            partial.mkdir(parents=True)
            start = time.time()
            try:
                stage.fn(partial)
            except Exception as e:
                failure = StageFailure(stage.dirname, e)
                logger.error(f"❌ {failure}", exc_info=logger.isEnabledFor(logging.DEBUG))
                failed_keys.add(stage.key)
                failures.append({'stage': stage.dirname, 'label': stage.label,
                                 'error': f"{type(e).__name__}: {e}"})
                continue
            meta = {'name': stage.name, 'label': stage.label, 'key': stage.key,
                    'params': to_plain(stage.params), 'upstream': [u.dirname for u in stage.upstream]}
            (partial / 'stage.json').write_text(json.dumps(meta, indent=2, sort_keys=True) + '\n')
            if target.exists():
                shutil.rmtree(target)
            partial.rename(target)
            (target / 'DONE').write_text(stage.key + '\n')
            timings[stage.dirname] = round(time.time() - start, 3)
            logger.info(f"✅ {stage.dirname} done in {timings[stage.dirname]:.1f}s")
        return failures, failed_keys


@contextmanager
def run_directory_lock(run_dir):
    """Exclusive ownership of a run directory through an O_EXCL lock file."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / '.lock'
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigurationError(f"run directory {run_dir} is locked by another process ({lock})")
    try:
        os.write(fd, str(os.getpid()).encode('ascii'))
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def resolve_run_dir(exp, create=True):
    if exp.output_dir:
        return Path(exp.output_dir)
    return get_runs_dir(create=create) / exp.name


# --- Plan construction ------------------------------------------------------

def _dataset_params(ds, seed):
    params = dataclasses.asdict(ds)
    params['seed'] = ds.seed if ds.seed is not None else seed
    if ds.source == 'folder':
        labels = Path(ds.path) / 'labels.csv'
        params['labels_sha256'] = hashlib.sha256(labels.read_bytes()).hexdigest() if labels.exists() else None
    return params


def _data_fn(params):
    def run(out):
        if params['source'] == 'synthetic':
            full = generate_synthetic(sum(params['splits']), params['image_size'], params['classes'],
                                      seed=params['seed'], channels=params['channels'], noise=params['noise'])
        else:
            full = load_image_folder(params['path'])
        split = make_splits(full, params['splits'], params['seed'])
        write_imageset(split.protect_set, out / 'protect')
        write_imageset(split.reference_set, out / 'reference')
        write_imageset(split.test_set, out / 'test')
    return run


class ExperimentPlanner:
    """Builds the stage plan of an ExperimentConfig; `evaluations` maps report labels to stages."""

    def __init__(self, exp, plan, device):
        self.exp = exp
        self.plan = plan
        self.device = device
        self.evaluations = {}
        self.grid = []
        self.transfer = []
        self.dilution = []
        self.augment = []
        self.protected = {}
        self.purified_fidelity = {}
        self.train_stages = []

    def path(self, stage):
        return self.plan.path(stage)

    # stages

    def data(self, ds, tag):
        params = _dataset_params(ds, derive_seed(self.exp.seed, f"data:{tag}"))
        return self.plan.add('data', f"dataset {tag}", params, [], _data_fn(params))

    def protect(self, spec, data_stage):
        plan = self

        def run(out):
            clean = read_imageset(plan.path(data_stage) / 'protect')
            protected = protect_dataset(spec, clean)
            write_imageset(protected, out / 'protected')
            image_fidelity(clean, protected).table.to_parquet(out / 'fidelity.parquet', index=False)
        return self.plan.add('protect', f"protect {protection_id(spec)}", {'spec': spec.to_dict()}, [data_stage], run)

    def harvest(self, spec, data_stage, n, restricted=True):
        """Leakage pairs; unrestricted harvests draw n images from the whole reference set."""
        lk = self.exp.leakage
        class_filter = lk.class_filter if restricted else None
        per_class = lk.per_class if restricted else None
        params = {'spec': spec.to_dict(), 'n': n, 'class_filter': class_filter, 'per_class': per_class,
                  'seed': derive_seed(self.exp.seed, 'harvest')}
        plan = self

        def run(out):
            reference = read_imageset(plan.path(data_stage) / 'reference')
            archive = harvest_leakage(spec, reference, n=None if per_class else n, seed=params['seed'],
                                      class_filter=class_filter, per_class=per_class)
            write_archive(archive, out / 'archive')
        return self.plan.add('harvest', f"harvest {protection_id(spec)} N={n}", params, [data_stage], run)

    def preprocess_for(self, beta):
        return Preprocess(beta=beta, seed=derive_seed(self.exp.seed, 'preprocess'))

    def train(self, harvest_stage, mode, beta):
        schedule = dataclasses.replace(self.exp.train.schedule, mode=mode)
        cfg = dataclasses.replace(self.exp.train, schedule=schedule, seed=derive_seed(self.exp.seed, 'train'))
        pp = self.preprocess_for(beta)
        plan = self

        def run(out):
            archive = read_archive(plan.path(harvest_stage) / 'archive')
            end = preprocess_dataset(pp, archive.protected, archive.ids)
            model = fit((archive.clean, end), cfg, checkpoint_dir=out, device=plan.device)
            pd.DataFrame({'step': np.arange(1, len(model.history) + 1), 'loss': model.history}) \
                .to_parquet(out / 'loss.parquet', index=False)
        stage = self.plan.add('train', f"train {mode.value} beta={beta} on {harvest_stage.dirname}",
                              {'train': cfg.to_dict(), 'preprocess': pp.to_dict()}, [harvest_stage], run)
        self.train_stages.append(stage)
        return stage

    def purify(self, train_stage, protect_stage, data_stage, s, beta):
        cfg = dataclasses.replace(self.exp.sampler, s=s, seed=derive_seed(self.exp.seed, 'purify'))
        pp = self.preprocess_for(beta)
        batch_size = self.exp.purify_batch_size
        plan = self

        def run(out):
            model = load_checkpoint(plan.path(train_stage) / 'model.bpck', device=plan.device)
            protected = read_imageset(plan.path(protect_stage) / 'protected')
            inputs = preprocess_dataset(pp, protected.images, protected.ids)
            result = purify_dataset(model, protected, cfg, batch_size=batch_size, inputs=inputs)
            write_imageset(result.images, out / 'purified')
            faults = [{'image_id': f.image_id, 'step_index': f.step_index, 'message': str(f)} for f in result.faults]
            (out / 'faults.json').write_text(json.dumps(faults, indent=2, sort_keys=True) + '\n')
            clean = read_imageset(plan.path(data_stage) / 'protect')
            image_fidelity(clean, result.images).table.to_parquet(out / 'fidelity.parquet', index=False)
        return self.plan.add('purify', f"purify s={s} beta={beta} with {train_stage.dirname}",
                             {'sampler': cfg.to_dict(), 'preprocess': pp.to_dict(), 'batch_size': batch_size},
                             [train_stage, protect_stage, data_stage], run)

    def evaluate(self, label, builder, upstream, data_stage):
        cfg = dataclasses.replace(self.exp.eval, seed=derive_seed(self.exp.seed, 'evaluate'))
        plan = self

        def run(out):
            dataset = builder()
            test = read_imageset(plan.path(data_stage) / 'test')
            report = train_and_score(dataset, test, cfg, device=plan.device)
            (out / 'eval.json').write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + '\n')
        stage = self.plan.add('evaluate', f"evaluate {label}", {'eval': cfg.to_dict(), 'label': label},
                              upstream, run)
        self.evaluations[label] = stage
        return stage

    # dataset builders

    def _reader(self, stage, sub):
        return lambda: read_imageset(self.path(stage) / sub)

    def build(self):
        exp = self.exp
        data = self.data(exp.dataset, 'main')
        leak_data = data
        if exp.leakage.dataset is not None:
            leak_data = self.data(exp.leakage.dataset, 'leakage')

        self.evaluate('clean', self._reader(data, 'protect'), [data], data)

        specs = [exp.protection] + list(exp.transfer_protections)
        for spec in specs:
            stage = self.protect(spec, data)
            self.protected[protection_id(spec)] = stage
            self.evaluate(f"protected/{protection_id(spec)}", self._reader(stage, 'protected'), [stage], data)

        main_id = protection_id(exp.protection)
        main_protect = self.protected[main_id]
        for n in exp.leakage.sizes():
            harvest = self.harvest(exp.protection, leak_data, n)
            for mode in exp.modes:
                for beta in exp.betas:
                    train = self.train(harvest, mode, beta)
                    for s in exp.s_values:
                        purify = self.purify(train, main_protect, data, s, beta)
                        label = f"purified/{main_id}/N={n}/{mode.value}/s={s}/beta={beta}"
                        self.evaluate(label, self._reader(purify, 'purified'), [purify], data)
                        self.grid.append({'label': label, 'protection': main_id, 'n_pairs': n,
                                          'schedule': mode.value, 's': s, 'beta': beta,
                                          'purify_stage': purify})

        for n in exp.dilution_sizes:
            harvest = self.harvest(exp.protection, leak_data, n, restricted=False)

            def build_diluted(harvest=harvest):
                protected = read_imageset(self.path(main_protect) / 'protected')
                archive = read_archive(self.path(harvest) / 'archive')
                return dilute(protected, archive.clean_set())
            label = f"dilution/{main_id}/N={n}"
            self.evaluate(label, build_diluted, [main_protect, harvest], data)
            self.dilution.append({'label': label, 'n_extra': n})

        for kind in exp.augmentations:
            def build_augmented(kind=kind):
                protected = read_imageset(self.path(main_protect) / 'protected')
                return augmentation_baseline(protected, kind)
            label = f"augment/{main_id}/{kind}"
            self.evaluate(label, build_augmented, [main_protect], data)
            self.augment.append({'label': label, 'kind': kind})

        if exp.transfer_protections:
            n = exp.leakage.sizes()[0]
            mode, beta, s = exp.modes[0], exp.betas[0], exp.s_values[0]
            for source in specs:
                train = self.train(self.harvest(source, leak_data, n), mode, beta)
                for target in specs:
                    target_id = protection_id(target)
                    purify = self.purify(train, self.protected[target_id], data, s, beta)
                    label = f"transfer/{protection_id(source)}->{target_id}"
                    self.evaluate(label, self._reader(purify, 'purified'), [purify], data)
                    self.transfer.append({'label': label, 'train_protection': protection_id(source),
                                          'target_protection': target_id})
        return self


# --- Report assembly -----------------------------------------------------------

def _load_eval(plan, stage):
    path = plan.path(stage) / 'eval.json'
    if not path.exists():
        return None
    return EvalReport.from_dict(json.loads(path.read_text()))


def _fidelity_summary(table):
    return {'psnr': summarize(table['psnr']), 'ssim': summarize(table['ssim'])}


def assemble_report(exp, planner, failures):
    """Deterministic report dict plus the grid and fidelity tables."""
    plan = planner.plan
    evals = {label: _load_eval(plan, stage) for label, stage in planner.evaluations.items()}

    def acc(label):
        r = evals.get(label)
        return None if r is None else r.accuracy_mean

    def train_size(label):
        r = evals.get(label)
        return None if r is None else r.provenance.get('train_size')

    main_id = protection_id(exp.protection)
    baselines = {
        'clean': evals['clean'].to_dict() if evals.get('clean') else None,
        'protected': {pid: (evals[f"protected/{pid}"].to_dict() if evals.get(f"protected/{pid}") else None)
                      for pid in planner.protected},
    }

    fidelity_rows = []
    for pid, stage in planner.protected.items():
        path = plan.path(stage) / 'fidelity.parquet'
        if path.exists():
            fidelity_rows.append(pd.read_parquet(path).assign(variant=f"protected/{pid}"))

    grid_rows = []
    for cell in planner.grid:
        report = evals.get(cell['label'])
        row = {k: v for k, v in cell.items() if k != 'purify_stage'}
        row['accuracy_mean'] = report.accuracy_mean if report else None
        row['accuracy_std'] = report.accuracy_std if report else None
        fid_path = plan.path(cell['purify_stage']) / 'fidelity.parquet'
        if fid_path.exists():
            table = pd.read_parquet(fid_path)
            fidelity_rows.append(table.assign(variant=cell['label']))
            row['psnr_mean'] = float(table['psnr'].mean())
            row['ssim_mean'] = float(table['ssim'].mean())
        else:
            row['psnr_mean'] = row['ssim_mean'] = None
        grid_rows.append(row)
    grid = pd.DataFrame(grid_rows, columns=['label', 'protection', 'n_pairs', 'schedule', 's', 'beta',
                                            'accuracy_mean', 'accuracy_std', 'psnr_mean', 'ssim_mean'])

    # explicit max-over-grid column
    grid['is_best'] = False
    best = []
    for (pid, n, mode), group in grid.groupby(['protection', 'n_pairs', 'schedule'], sort=True):
        scored = group.dropna(subset=['accuracy_mean'])
        if scored.empty:
            continue
        idx = scored['accuracy_mean'].idxmax()
        grid.loc[idx, 'is_best'] = True
        best.append({'protection': pid, 'n_pairs': int(n), 'schedule': mode, 's': float(grid.loc[idx, 's']),
                     'beta': float(grid.loc[idx, 'beta']), 'accuracy_mean': float(grid.loc[idx, 'accuracy_mean']),
                     'label': grid.loc[idx, 'label']})

    fidelity = pd.concat(fidelity_rows, ignore_index=True) if fidelity_rows else \
        pd.DataFrame(columns=['id', 'psnr', 'ssim', 'variant'])
    fidelity_summary = {variant: _fidelity_summary(group)
                        for variant, group in fidelity.groupby('variant', sort=True)}

    report = {
        'experiment': exp.name,
        'config_hash': exp.hash(),
        'baselines': baselines,
        'grid': grid.astype(object).where(grid.notna(), None).to_dict(orient='records'),
        'best': best,
        'fidelity': fidelity_summary,
        'dilution': [dict(d, accuracy_mean=acc(d['label']), train_size=train_size(d['label']))
                     for d in planner.dilution],
        'augmentations': [dict(a, accuracy_mean=acc(a['label'])) for a in planner.augment],
        'transfer': [],
        'partial_leakage': None,
        'failures': failures,
    }

    protected_main = acc(f"protected/{main_id}")
    for t in planner.transfer:
        protected_acc = acc(f"protected/{t['target_protection']}")
        purified_acc = acc(t['label'])
        report['transfer'].append(dict(t, accuracy_mean=purified_acc,
                                       improvement=(purified_acc - protected_acc)
                                       if purified_acc is not None and protected_acc is not None else None))

    lk = exp.leakage
    if lk.class_filter is not None and evals.get(f"protected/{main_id}") is not None and best:
        leaked = sorted(set(lk.class_filter))
        protected_report = evals[f"protected/{main_id}"]
        all_classes = sorted(protected_report.per_class_accuracy)
        non_leaked = [c for c in all_classes if c not in leaked]
        entries = []
        for b in best:
            purified_report = evals.get(b['label'])
            if purified_report is None:
                continue
            before = {'leaked': protected_report.class_subset_accuracy(leaked),
                      'non_leaked': protected_report.class_subset_accuracy(non_leaked),
                      'all': protected_report.accuracy_mean}
            after = {'leaked': purified_report.class_subset_accuracy(leaked),
                     'non_leaked': purified_report.class_subset_accuracy(non_leaked),
                     'all': purified_report.accuracy_mean}
            improvement = {k: (after[k] - before[k]) if after[k] is not None and before[k] is not None else None
                           for k in before}
            gap = None
            if improvement['leaked'] is not None and improvement['non_leaked'] is not None:
                gap = improvement['leaked'] - improvement['non_leaked']
            entries.append({'label': b['label'], 'protected': before, 'purified': after,
                            'improvement': improvement, 'gap': gap,
                            'per_class_protected': protected_report.per_class_accuracy,
                            'per_class_purified': purified_report.per_class_accuracy})
        report['partial_leakage'] = {'leaked_classes': leaked, 'non_leaked_classes': non_leaked,
                                     'per_class_pairs': lk.per_class, 'runs': entries}

    if protected_main is not None:
        report['protected_accuracy'] = protected_main
    return to_plain(report), grid, fidelity


def write_report(run_dir, report, grid, fidelity):
    run_dir = Path(run_dir)
    tables = run_dir / 'tables'
    tables.mkdir(parents=True, exist_ok=True)
    grid.to_parquet(tables / 'grid.parquet', index=False)
    fidelity.to_parquet(tables / 'fidelity.parquet', index=False)
    text = json.dumps(report, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + '\n'
    (run_dir / 'report.json').write_text(text, encoding='utf-8')
    return run_dir / 'report.json'


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


@dataclass
class ExperimentResult:
    run_dir: Path
    plan: list
    report: Optional[dict] = None
    failures: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.failures


def run_experiment(exp, run_dir=None, dry_run=False, device=None):
    """
    Execute (or, with dry_run, only plan) the experiment's stage graph.
    Stage failures do not abort independent stages; they are collected in
    the result and in report.json.
    """
    run_dir = Path(run_dir) if run_dir else resolve_run_dir(exp, create=not dry_run)
    device = get_device(device)
    plan = StagePlan(run_dir / 'stages')
    planner = ExperimentPlanner(exp, plan, device).build()
    description = plan.describe()
    if dry_run:
        return ExperimentResult(run_dir=run_dir, plan=description)

    with run_directory_lock(run_dir):
        (run_dir / 'config.json').write_text(json.dumps(exp.to_dict(), indent=2, sort_keys=True) + '\n')
        timings = {}
        failures, _ = plan.execute(timings)
        report, grid, fidelity = assemble_report(exp, planner, failures)
        write_report(run_dir, report, grid, fidelity)
        (run_dir / 'timings.json').write_text(json.dumps(timings, indent=2, sort_keys=True) + '\n')
        try:
            write_plots(report, grid, fidelity, run_dir / 'plots')
        except Exception as e:
            logger.warning(f"⚠️  Plot rendering failed: {e}")
    logger.info(f"📊 Report: {run_dir / 'report.json'} ({len(failures)} failed stages)")
    return ExperimentResult(run_dir=run_dir, plan=description, report=report, failures=failures)
