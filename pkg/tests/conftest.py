import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'src'))
os.environ.setdefault('BRIDGEPURE_PROGRESS', '0')

from imagesets import generate_synthetic  # noqa: E402


@pytest.fixture(scope='session')
def shapes_small():
    """60 synthetic 3x8x8 images over 3 classes."""
    return generate_synthetic(60, image_size=8, classes=3, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    path = tmp_path / 'runs'
    monkeypatch.setenv('BRIDGEPURE_RUNS_DIR', str(path))
    return path
