"""
Pytest configuration and fixtures for the trajmask test suite.
"""

import json
import os
import shutil
import tempfile

import numpy as np
import pytest
import torch

from config import ModelConfig
from core_types import NormStats, PoiVocab, StopPoint
from ingest import StopDataset, build_dataset, dataset_windows
from masking import TaskKind, make_plan
from model import encode_windows, make_batch
from synthgen import ScenarioConfig, generate

os.environ.setdefault("TRAJMASK_ENV", "testing")


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config):
    """Configure custom markers."""
    config.addinivalue_line("markers", "slow: marks tests as slow")
    config.addinivalue_line("markers", "integration: marks tests as integration tests")
    config.addinivalue_line("markers", "unit: marks tests as unit tests")


def pytest_collection_modifyitems(config, items):
    """Modify test items in-place to handle markers."""
    if not config.getoption("--run-slow"):
        skip_slow = pytest.mark.skip(reason="need --run-slow option to run")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip_slow)


@pytest.fixture(scope='function')
def temp_dir():
    """Create a temporary directory for test files."""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    shutil.rmtree(temp_dir)


def _write_records(path, records):
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record) + '\n')
    return path


@pytest.fixture(scope='session')
def vocab():
    return PoiVocab(('home', 'work', 'gym', 'cafe'))


@pytest.fixture(scope='session')
def stats():
    return NormStats(lat_min=34.0, lat_max=34.2, lon_min=-118.4, lon_max=-118.2, day_span=6)


@pytest.fixture(scope='session')
def small_model_config():
    """2 layers, width 16, 2 heads, L=6, vocabulary of 4 categories plus specials."""
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, dropout_p=0.0, vocab_size=6, max_len=6)


def _random_windows(n_windows, lengths, n_categories, seed=0):
    """Random valid stop windows: ordered, non-overlapping, inside the default stats box."""
    rng = np.random.default_rng(seed)
    windows = []
    for k in range(n_windows):
        length = lengths[k % len(lengths)]
        t = float(rng.integers(0, 3 * 86400))
        stops = []
        for _ in range(length):
            start = t + float(rng.integers(60, 3600))
            end = start + float(rng.integers(600, 7200))
            stops.append(StopPoint(
                category=int(rng.integers(n_categories)),
                start_time=start,
                end_time=end,
                lat=float(rng.uniform(34.0, 34.2)),
                lon=float(rng.uniform(-118.4, -118.2)),
            ))
            t = end
        windows.append(tuple(stops))
    return windows


@pytest.fixture(scope='function')
def small_batch(small_model_config, vocab, stats):
    """Four windows of lengths 6, 4, 6, 3 with random pretraining plans."""
    windows = _random_windows(4, [6, 4, 6, 3], vocab.n_real, seed=11)
    encoded = encode_windows(windows, vocab, stats, small_model_config.max_len)
    rng = np.random.default_rng(5)
    plans = [
        make_plan(TaskKind.PRETRAIN_RANDOM, int(n), encoded.max_len, rng=rng)
        for n in encoded.valid_len
    ]
    return make_batch(encoded, np.arange(len(encoded)), plans)


@pytest.fixture(scope='session')
def template_dataset() -> StopDataset:
    """One agent, one weekday, no noise and no skipping."""
    return generate(ScenarioConfig(n_agents=1, n_days=1, schedule_noise_min=0.0, skip_prob=0.0))


@pytest.fixture(scope='session')
def synthetic_dataset() -> StopDataset:
    return generate(ScenarioConfig(n_agents=6, n_days=7, seed=3))


@pytest.fixture(scope='session')
def synthetic_windows(synthetic_dataset):
    return dataset_windows(synthetic_dataset, 16)


@pytest.fixture(scope='function')
def stop_file(temp_dir, synthetic_dataset):
    path = os.path.join(temp_dir, 'stops.jsonl')
    return _write_records(path, synthetic_dataset.to_records())


@pytest.fixture(scope='function')
def records_file(temp_dir):
    """Factory writing JSON-lines records into temp_dir."""
    def factory(name, records):
        return _write_records(os.path.join(temp_dir, name), records)
    return factory


@pytest.fixture(scope='session')
def window_factory():
    return _random_windows


@pytest.fixture(scope='session')
def make_dataset():
    """Factory turning (agent_id, category, start, end, lat, lon) tuples into a dataset."""
    def factory(rows):
        return build_dataset(
            (agent, category, StopPoint(-1, start, end, lat, lon))
            for agent, category, start, end, lat, lon in rows
        )
    return factory


def pytest_assertrepr_compare(op, left, right):
    """Custom assertion explanations."""
    if isinstance(left, np.ndarray) and isinstance(right, np.ndarray) and op == "==":
        return [
            "Array comparison failed:",
            f"Shape: {left.shape} != {right.shape}",
            f"Max difference: {np.max(np.abs(left - right))}",
            f"Mean difference: {np.mean(np.abs(left - right))}"
        ]
    if isinstance(left, torch.Tensor) and isinstance(right, torch.Tensor) and op == "==":
        return [
            "Tensor comparison failed:",
            f"Shape: {tuple(left.shape)} != {tuple(right.shape)}",
        ]
