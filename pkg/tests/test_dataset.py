import json

import numpy as np
from pytest import raises

from heart_surrogate.dataset import Dataset, TrainingSample, read_dataset, write_dataset
from heart_surrogate.errors import ConfigurationError, DatasetError
from heart_surrogate.lnode import PHYSICAL_LABELS
from heart_surrogate.refmodel import ExponentialFamily, exponential_dataset


def _small(n_test: int = 0) -> Dataset:
    return exponential_dataset(6, seed=3, t_hb=0.05, dt=0.01, n_test=n_test)


def test_written_dataset_reads_back_exactly(tmp_path):
    dataset = _small(n_test=2)
    write_dataset(dataset, tmp_path)
    back = read_dataset(tmp_path)
    assert back.ids == dataset.ids
    assert back.space == dataset.space
    assert back.seed == 3
    assert back.generator['generator'] == 'exponential-decay/1'
    for a, b in zip(dataset.samples, back.samples):
        assert np.array_equal(a.theta, b.theta)
        assert np.array_equal(a.states, b.states)
        assert a.split == b.split


def test_split_and_subset():
    dataset = _small(n_test=2)
    assert len(dataset.split('test')) == 2
    assert len(dataset.split('train')) == 4
    assert dataset.subset([5, 0]).ids == [dataset.ids[5], dataset.ids[0]]


def test_samples_follow_the_decay():
    dataset = _small()
    for sample in dataset.samples:
        k = sample.theta[0]
        assert ExponentialFamily().space.contains(sample.theta)
        assert np.allclose(sample.states, sample.states[0] * np.exp(-k * sample.times)[:, None])
    assert dataset.shared_period() == 0.05


def test_mixed_periods_are_rejected():
    a = _small().samples[0]
    times = np.linspace(0.0, 0.06, 7)
    b = TrainingSample('other', a.theta, times, np.ones((7, 8)), 0.06, 0.0)
    with raises(ConfigurationError):
        Dataset(ExponentialFamily().space, (a, b)).shared_period()


def test_sample_outside_space():
    sample = _small().samples[0]
    wide = TrainingSample('far', np.array([10.0]), sample.times, sample.states, 0.05, 0.0)
    with raises(DatasetError):
        Dataset(ExponentialFamily().space, (wide,))


class TestSampleValidation:
    times = np.linspace(0.0, 0.05, 6)

    def test_grid_must_cover_period(self):
        with raises(DatasetError):
            TrainingSample('s', [1.0], self.times, np.ones((6, 8)), 0.06, 0.0)

    def test_states_must_be_finite(self):
        states = np.ones((6, 8))
        states[2, 3] = np.nan
        with raises(DatasetError):
            TrainingSample('s', [1.0], self.times, states, 0.05, 0.0)

    def test_state_width(self):
        with raises(DatasetError):
            TrainingSample('s', [1.0], self.times, np.ones((6, 7)), 0.05, 0.0)

    def test_unknown_split(self):
        with raises(DatasetError):
            TrainingSample('s', [1.0], self.times, np.ones((6, 8)), 0.05, 0.0, split='valid')


def test_manifest_version_is_checked(tmp_path):
    write_dataset(_small(), tmp_path)
    manifest = json.loads((tmp_path / 'manifest.json').read_text())
    manifest['format_version'] = 2
    (tmp_path / 'manifest.json').write_text(json.dumps(manifest))
    with raises(DatasetError):
        read_dataset(tmp_path)


def test_missing_manifest(tmp_path):
    with raises(DatasetError):
        read_dataset(tmp_path)


def test_bad_trajectory_header(tmp_path):
    write_dataset(_small(), tmp_path)
    path = next((tmp_path / 'samples').iterdir())
    lines = path.read_text().splitlines()
    lines[0] = ','.join(('t',) + tuple(reversed(PHYSICAL_LABELS)))
    path.write_text('\n'.join(lines))
    with raises(DatasetError):
        read_dataset(tmp_path)
