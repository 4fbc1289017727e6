from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from heart_surrogate.errors import ConfigurationError, DatasetError
from heart_surrogate.lnode import (
    N_PHYSICAL,
    PHYSICAL_LABELS,
    CycleContext,
    Trajectory,
    read_trajectory_csv,
    write_trajectory_csv,
)
from heart_surrogate.parameters import ParameterSpace

logger = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1
SPLITS = ('train', 'test')


@dataclass(frozen=True, eq=False)
class TrainingSample:
    sample_id: str
    theta: np.ndarray
    times: np.ndarray
    states: np.ndarray
    t_hb: float
    av_delay: float
    split: str = 'train'
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=np.float64)
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim != 2 or states.shape != (times.size, N_PHYSICAL):
            raise DatasetError(
                f'Sample {self.sample_id}: states {states.shape} must be '
                f'{times.size} x {N_PHYSICAL}'
            )
        if times.size < 3 or np.any(np.diff(times) <= 0):
            raise DatasetError(f'Sample {self.sample_id}: time grid must increase over >= 3 points')
        if abs(times[0]) > 1e-12 or abs(times[-1] - self.t_hb) > 1e-9 * max(1.0, self.t_hb):
            raise DatasetError(
                f'Sample {self.sample_id}: grid must cover [0, {self.t_hb}], '
                f'got [{times[0]}, {times[-1]}]'
            )
        if not np.isfinite(states).all():
            raise DatasetError(f'Sample {self.sample_id}: non-finite trace values')
        if self.split not in SPLITS:
            raise DatasetError(f'Sample {self.sample_id}: unknown split {self.split!r}')
        object.__setattr__(self, 'times', times)
        object.__setattr__(self, 'states', states)
        object.__setattr__(self, 'theta', np.asarray(self.theta, dtype=np.float64).reshape(-1))

    @property
    def initial_state(self) -> np.ndarray:
        return self.states[0]

    @property
    def trajectory(self) -> Trajectory:
        ctx = CycleContext(self.t_hb, self.av_delay, float(self.times[1] - self.times[0]))
        return Trajectory(ctx, self.times, self.states, PHYSICAL_LABELS)


@dataclass(frozen=True, eq=False)
class Dataset:
    space: ParameterSpace
    samples: tuple[TrainingSample, ...]
    generator: Mapping[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        for sample in self.samples:
            if sample.theta.size != self.space.dim:
                raise DatasetError(
                    f'Sample {sample.sample_id} has {sample.theta.size} parameters, '
                    f'space defines {self.space.dim}'
                )
            if not self.space.contains(sample.theta):
                raise DatasetError(f'Sample {sample.sample_id} lies outside the parameter space')

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @property
    def thetas(self) -> np.ndarray:
        return np.stack([s.theta for s in self.samples])

    def shared_period(self) -> float:
        periods = {s.t_hb for s in self.samples}
        if len(periods) != 1:
            raise ConfigurationError(f'Samples must share one heartbeat period, got {periods}')
        return periods.pop()

    def subset(self, indices: Iterable[int]) -> Dataset:
        return replace(self, samples=tuple(self.samples[i] for i in indices))

    def split(self, tag: str) -> Dataset:
        return replace(self, samples=tuple(s for s in self.samples if s.split == tag))


def write_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    (directory / 'samples').mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in dataset.samples:
        rel = f'samples/{sample.sample_id}.csv'
        write_trajectory_csv(sample.trajectory, directory / rel)
        entries.append(
            {
                'id': sample.sample_id,
                'file': rel,
                'theta': dataset.space.as_dict(sample.theta),
                't_hb': sample.t_hb,
                'av_delay': sample.av_delay,
                'split': sample.split,
                'warnings': list(sample.warnings),
            }
        )
    manifest = {
        'format_version': MANIFEST_FORMAT_VERSION,
        'space': dataset.space.to_json(),
        'generator': dict(dataset.generator),
        'seed': dataset.seed,
        'n_samples': len(entries),
        'samples': entries,
    }
    path = directory / 'manifest.json'
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info('Wrote %d samples to %s', len(entries), directory)
    return path


def read_dataset(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / 'manifest.json').read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f'Could not read dataset manifest in {directory}: {exc}') from exc
    if manifest.get('format_version') != MANIFEST_FORMAT_VERSION:
        raise DatasetError(f'Unsupported manifest version {manifest.get("format_version")!r}')
    space = ParameterSpace.from_json(manifest['space'])
    samples = [_read_sample(directory, space, entry) for entry in manifest['samples']]
    if manifest.get('n_samples', len(samples)) != len(samples):
        raise DatasetError(
            f'Manifest records {manifest["n_samples"]} samples but lists {len(samples)}'
        )
    return Dataset(space, tuple(samples), manifest.get('generator', {}), manifest.get('seed'))


def _read_sample(
    directory: Path, space: ParameterSpace, entry: Mapping[str, Any]
) -> TrainingSample:
    try:
        theta = space.vector(entry['theta'])
        traj = read_trajectory_csv(directory / entry['file'], float(entry['av_delay']))
        return TrainingSample(
            sample_id=str(entry['id']),
            theta=theta,
            times=traj.times,
            states=traj.physical,
            t_hb=float(entry['t_hb']),
            av_delay=float(entry['av_delay']),
            split=str(entry.get('split', 'train')),
            warnings=tuple(entry.get('warnings', ())),
        )
    except (KeyError, ValueError) as exc:
        raise DatasetError(f'Malformed manifest entry {entry!r}: {exc}') from exc


def sample_from_trajectory(
    sample_id: str, theta: np.ndarray, traj: Trajectory, split: str = 'train',
    warnings: Sequence[str] = (),
) -> TrainingSample:
    return TrainingSample(
        sample_id=sample_id,
        theta=theta,
        times=traj.times,
        states=traj.physical,
        t_hb=traj.context.t_hb,
        av_delay=traj.context.av_delay,
        split=split,
        warnings=tuple(warnings),
    )
