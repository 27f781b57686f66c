import json

import pytest

from config import canonical_json, config_hash, derive_seed, get_runs_dir, load_json_file, parse_fraction
from errors import ConfigurationError
from experiment import ExperimentConfig, load_experiment_config
from protections import ProtectionKind


@pytest.mark.parametrize('text, expected', [
    ('8/255', 8 / 255),
    (' 16/255 ', 16 / 255),
    ('0.5', 0.5),
    (2, 2.0),
    (0.25, 0.25),
])
def test_parse_fraction(text, expected):
    assert parse_fraction(text) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize('text', ['eight', '1/0', True, '8//255'])
def test_parse_fraction_rejects_garbage(text):
    with pytest.raises(ConfigurationError):
        parse_fraction(text)


def test_canonical_hash_ignores_key_order():
    a = {'b': 1, 'a': [1, 2, {'y': 0.5, 'x': 'z'}]}
    b = {'a': [1, 2, {'x': 'z', 'y': 0.5}], 'b': 1}
    assert canonical_json(a) == canonical_json(b)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({'b': 2, 'a': a['a']})


def test_derive_seed():
    assert derive_seed(0, 'train') == derive_seed(0, 'train')
    assert derive_seed(0, 'train') != derive_seed(0, 'purify')
    assert derive_seed(0, 'train') != derive_seed(1, 'train')
    assert 0 <= derive_seed(123, 'x') < 2 ** 63


def test_experiment_config_reads_fractions_and_enums(tmp_path):
    path = tmp_path / 'exp.json'
    path.write_text(json.dumps({
        'name': 'unit',
        'protection': {'kind': 'classwise-linf', 'epsilon': '8/255'},
        'train': {'steps': 10, 'schedule': {'mode': 'vp'}},
        's_values': [0, 0.33],
    }, indent=2))
    exp = load_experiment_config(path)
    assert exp.protection.kind == ProtectionKind.CLASSWISE_LINF
    assert exp.protection.epsilon == pytest.approx(8 / 255)
    assert exp.train.schedule.mode.value == 'VP'
    assert exp.modes[0].value == 'VP'
    assert exp.s_values == [0.0, 0.33]


def test_unknown_key_reports_its_line(tmp_path):
    path = tmp_path / 'exp.json'
    path.write_text('{\n  "name": "unit",\n  "protection": {\n    "kind": "one-pixel",\n    "epsilonn": 1\n  }\n}\n')
    with pytest.raises(ConfigurationError) as info:
        load_experiment_config(path)
    assert info.value.line == 5
    assert info.value.key == 'epsilonn'
    assert str(info.value).startswith('line 5:')


def test_invalid_json_reports_its_line(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text('{\n  "name": "unit",\n  "seed": ,\n}\n')
    with pytest.raises(ConfigurationError) as info:
        load_json_file(path)
    assert info.value.line == 3


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_json_file(tmp_path / 'nope.json')


@pytest.mark.parametrize('overrides', [
    {'s_values': [1.5]},
    {'betas': []},
    {'schedule_modes': ['sde']},
    {'augmentations': ['mixup']},
    {'leakage': {'class_filter': [0, 12]}},
    {'leakage': {'per_class': 5}},
    {'protection': {'kind': 'one-pixel', 'epsilon': 3}},
    {'train': {'steps': 'many'}},
])
def test_experiment_config_validation(overrides):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(overrides)


def test_experiment_hash_is_stable():
    a = ExperimentConfig.from_dict({'name': 'x', 'betas': [0, 0.02]})
    b = ExperimentConfig.from_dict({'betas': [0.0, 0.02], 'name': 'x'})
    assert a.hash() == b.hash()
    assert a.hash() != ExperimentConfig.from_dict({'name': 'x', 'betas': [0.1]}).hash()


def test_runs_dir_follows_environment(runs_dir):
    assert get_runs_dir() == runs_dir
    assert runs_dir.is_dir()
