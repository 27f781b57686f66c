import json
import sys
from pathlib import Path

import pandas as pd
import pytest

from errors import ConfigurationError
from experiment import ExperimentConfig, StagePlan, run_directory_lock, run_experiment

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / 'tools'))
from check_acceptance import check_report  # noqa: E402

TINY = {
    'name': 'tiny',
    'seed': 0,
    'dataset': {'image_size': 16, 'classes': 2, 'channels': 1, 'splits': [24, 12, 12]},
    'protection': {'kind': 'classwise-linf', 'epsilon': '8/255', 'class_count': 2},
    'leakage': {'n_pairs': [8]},
    'train': {'network': 'mlp', 'network_kwargs': {'hidden': 32, 'emb_dim': 8}, 'steps': 3, 'batch_size': 4,
              'checkpoint_every': 0},
    'sampler': {'steps': 3},
    's_values': [0.0],
    'betas': [0.0],
    'eval': {'classifier': 'linear-probe', 'trials': 1},
}


def _tiny(**changes):
    data = json.loads(json.dumps(TINY))
    data.update(changes)
    return ExperimentConfig.from_dict(data)


def _by_name(plan):
    rows = {}
    for row in plan:
        rows.setdefault(row['stage'].split('-')[0], []).append(row)
    return rows


def test_dry_run_plans_without_writing(tmp_path):
    result = run_experiment(_tiny(), run_dir=tmp_path / 'run', dry_run=True, device='cpu')
    names = _by_name(result.plan)
    assert sorted(names) == ['data', 'evaluate', 'harvest', 'protect', 'purify', 'train']
    assert len(names['evaluate']) == 3
    assert not any(row['cached'] for row in result.plan)
    assert not (tmp_path / 'run').exists()
    assert result.report is None


def test_plan_grows_with_the_grid(tmp_path):
    exp = _tiny(s_values=[0.0, 0.5], betas=[0.0, 0.02], schedule_modes=['ve', 'vp'])
    names = _by_name(run_experiment(exp, run_dir=tmp_path, dry_run=True, device='cpu').plan)
    assert len(names['train']) == 4
    assert len(names['purify']) == 8
    assert len(names['harvest']) == 1
    assert len(names['evaluate']) == 2 + 8


def test_stage_plan_caches_and_propagates_failures(tmp_path):
    calls = []

    def ok(out):
        calls.append(out.name)
        (out / 'value.txt').write_text('1')

    def broken(out):
        raise ValueError('boom')

    plan = StagePlan(tmp_path / 'stages')
    a = plan.add('alpha', 'first', {'x': 1}, [], ok)
    assert plan.add('alpha', 'first again', {'x': 1}, [], ok) is a
    b = plan.add('beta', 'fails', {'x': 2}, [a], broken)
    c = plan.add('gamma', 'downstream', {}, [b], ok)
    d = plan.add('delta', 'independent', {}, [a], ok)

    timings = {}
    failures, failed = plan.execute(timings)
    assert [f['stage'] for f in failures] == [b.dirname, c.dirname]
    assert failures[0]['error'] == 'ValueError: boom'
    assert failures[1]['error'] == 'upstream stage failed'
    assert failed == {b.key, c.key}
    assert plan.is_cached(a) and plan.is_cached(d) and not plan.is_cached(b)
    assert (plan.path(a) / 'value.txt').read_text() == '1'
    assert json.loads((plan.path(d) / 'stage.json').read_text())['upstream'] == [a.dirname]
    assert set(timings) == {a.dirname, d.dirname}

    calls.clear()
    plan.execute({})
    assert calls == []


def test_stage_key_depends_on_params_and_upstream(tmp_path):
    plan = StagePlan(tmp_path)
    a = plan.add('alpha', 'a', {'x': 1}, [], lambda out: None)
    b = plan.add('alpha', 'b', {'x': 2}, [], lambda out: None)
    c1 = plan.add('gamma', 'c', {}, [a], lambda out: None)
    c2 = plan.add('gamma', 'c', {}, [b], lambda out: None)
    assert a.key != b.key
    assert c1.key != c2.key
    assert len(a.key) == 16


def test_run_directory_lock(tmp_path):
    with run_directory_lock(tmp_path / 'run'):
        with pytest.raises(ConfigurationError):
            with run_directory_lock(tmp_path / 'run'):
                pass
    assert not (tmp_path / 'run' / '.lock').exists()


@pytest.mark.slow
def test_tiny_experiment_end_to_end(tmp_path):
    run_dir = tmp_path / 'run'
    result = run_experiment(_tiny(), run_dir=run_dir, device='cpu')
    assert result.ok, result.failures
    for name in ('config.json', 'report.json', 'timings.json', 'tables/grid.parquet', 'tables/fidelity.parquet'):
        assert (run_dir / name).exists(), name

    report = json.loads((run_dir / 'report.json').read_text())
    assert report['experiment'] == 'tiny'
    assert report['baselines']['clean']['accuracy_mean'] is not None
    assert len(report['grid']) == 1 and report['grid'][0]['is_best']
    assert report['best'][0]['s'] == 0.0
    assert set(report['fidelity']) == {row['label'] for row in report['grid']} | {
        f"protected/{pid}" for pid in report['baselines']['protected']}
    grid = pd.read_parquet(run_dir / 'tables' / 'grid.parquet')
    assert grid['label'].tolist() == [report['grid'][0]['label']]

    first = (run_dir / 'report.json').read_bytes()
    again = run_experiment(_tiny(), run_dir=run_dir, device='cpu')
    assert all(row['cached'] for row in again.plan)
    assert (run_dir / 'report.json').read_bytes() == first
    assert json.loads((run_dir / 'timings.json').read_text()) == {}


@pytest.mark.slow
def test_changing_beta_reuses_protection_and_harvest(tmp_path):
    run_dir = tmp_path / 'run'
    assert run_experiment(_tiny(), run_dir=run_dir, device='cpu').ok
    plan = run_experiment(_tiny(betas=[0.02]), run_dir=run_dir, dry_run=True, device='cpu').plan
    cached = {row['stage'].split('-')[0]: row['cached'] for row in plan if not row['stage'].startswith('evaluate')}
    assert cached == {'data': True, 'protect': True, 'harvest': True, 'train': False, 'purify': False}


def _report(clean=90.0, protected=20.0, purified=88.0, failures=()):
    return {
        'experiment': 'unit', 'config_hash': '0' * 64,
        'baselines': {'clean': {'accuracy_mean': clean}, 'protected': {'p': {'accuracy_mean': protected}}},
        'best': [{'protection': 'p', 'accuracy_mean': purified, 'label': 'purified/p'}],
        'fidelity': {'protected/p': {'psnr': {'mean': 30.0}, 'ssim': {'mean': 0.8}},
                     'purified/p': {'psnr': {'mean': 33.0}, 'ssim': {'mean': 0.9}}},
        'partial_leakage': None,
        'failures': list(failures),
    }


def test_acceptance_checks_pass_on_a_good_report():
    results = check_report(_report())
    assert results and all(passed for _, passed, _ in results)


def test_acceptance_checks_flag_weak_results():
    failed = {name for name, passed, _ in check_report(_report(protected=70.0, purified=80.0)) if not passed}
    assert any('protection drop' in name for name in failed)
    assert any('within 5 of clean' in name for name in failed)
    assert not all(passed for _, passed, _ in check_report(_report(failures=[{'stage': 'x'}])))


def _rows(plan, name):
    return [row for row in plan if row['stage'].startswith(f"{name}-")]


@pytest.mark.slow
def test_partial_leakage_and_dilution_report(tmp_path):
    exp = _tiny(leakage={'per_class': 3, 'class_filter': [0]}, dilution_sizes=[5])
    result = run_experiment(exp, run_dir=tmp_path / 'run', device='cpu')
    assert result.ok, result.failures
    report = result.report

    partial = report['partial_leakage']
    assert partial['leaked_classes'] == [0]
    assert partial['non_leaked_classes'] == [1]
    assert partial['per_class_pairs'] == 3
    run = partial['runs'][0]
    assert run['label'] == report['best'][0]['label']
    for key in ('leaked', 'non_leaked', 'all'):
        assert run['improvement'][key] == pytest.approx(run['purified'][key] - run['protected'][key])
    assert run['gap'] == pytest.approx(run['improvement']['leaked'] - run['improvement']['non_leaked'])
    assert report['grid'][0]['n_pairs'] == 3

    [dilution] = report['dilution']
    assert dilution['n_extra'] == 5
    assert dilution['train_size'] == 24 + 5
    assert dilution['accuracy_mean'] is not None
    harvests = {row['label'] for row in _rows(result.plan, 'harvest')}
    assert len(harvests) == 2 and any(label.endswith('N=5') for label in harvests)


@pytest.mark.slow
def test_mixture_protection_with_transfer_matrix(tmp_path):
    mixture = {'kind': 'mixture', 'class_count': 2,
               'mixture_members': [{'kind': 'classwise-linf', 'class_count': 2},
                                   {'kind': 'one-pixel', 'class_count': 2, 'pattern_seed': 1}]}
    exp = _tiny(protection=mixture, transfer_protections=[{'kind': 'classwise-linf', 'class_count': 2}])
    result = run_experiment(exp, run_dir=tmp_path / 'run', device='cpu')
    assert result.ok, result.failures
    report = result.report

    protected = report['baselines']['protected']
    assert len(protected) == 2
    assert any(pid.startswith('mixture-') for pid in protected)
    assert len(report['transfer']) == 4
    pairs = {(t['train_protection'], t['target_protection']) for t in report['transfer']}
    assert pairs == {(a, b) for a in protected for b in protected}
    for entry in report['transfer']:
        target = protected[entry['target_protection']]['accuracy_mean']
        assert entry['improvement'] == pytest.approx(entry['accuracy_mean'] - target)
    assert len(_rows(result.plan, 'train')) == 2


@pytest.mark.slow
def test_cross_dataset_leakage_harvests_from_the_other_dataset(tmp_path):
    other = {'image_size': 16, 'classes': 2, 'channels': 1, 'splits': [4, 12, 4], 'noise': 0.08, 'seed': 7}
    exp = _tiny(leakage={'n_pairs': [8], 'dataset': other})
    result = run_experiment(exp, run_dir=tmp_path / 'run', device='cpu')
    assert result.ok, result.failures

    data = {row['label']: row['stage'] for row in _rows(result.plan, 'data')}
    assert set(data) == {'dataset main', 'dataset leakage'}
    [harvest] = _rows(result.plan, 'harvest')
    assert harvest['upstream'] == [data['dataset leakage']]
    assert len(result.report['grid']) == 1
    assert result.report['grid'][0]['accuracy_mean'] is not None
