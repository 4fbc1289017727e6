from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.stats import qmc

from heart_surrogate.errors import ConfigurationError, DatasetError, InputShapeError
from heart_surrogate.lnode import AV_DELAY, N_PHYSICAL, LnodeModel, Trajectory, rollout
from heart_surrogate.parallel import SERIAL, WorkerPool, chunks
from heart_surrogate.parameters import ParameterSpace
from heart_surrogate.utils import derive_seed, make_rng

logger = logging.getLogger(__name__)

CHAMBERS = ('LA', 'LV', 'RA', 'RV')
QUANTITIES = ('p', 'V', 'dpdt', 'dVdt')
QOI_LABELS = tuple(
    f'{qty}_{chamber}_{stat}'
    for chamber in CHAMBERS
    for qty in QUANTITIES
    for stat in ('max', 'min')
)

_STREAM_SALTELLI = 31
_STREAM_BOOTSTRAP = 32
_EVAL_CHUNK = 64
_EPS = np.finfo(np.float64).eps


def plan_size(n: int, n_params: int) -> int:
    return n * (2 * n_params + 2)


@dataclass(frozen=True, eq=False)
class SaltelliDesign:
    """
    Base matrices A and B plus the column hybrids: AB_i is A with column i taken from B and
    BA_i is B with column i taken from A.
    """

    space: ParameterSpace
    a: np.ndarray
    b: np.ndarray
    ab: np.ndarray
    ba: np.ndarray

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def n_evals(self) -> int:
        return plan_size(self.n, self.space.dim)

    @property
    def rows(self) -> np.ndarray:
        """All points in evaluation order: A, B, AB_1..AB_P, BA_1..BA_P."""
        p = self.space.dim
        return np.concatenate(
            [self.a, self.b, self.ab.reshape(p * self.n, p), self.ba.reshape(p * self.n, p)]
        )


def saltelli_sample(space: ParameterSpace, n: int, seed: int) -> SaltelliDesign:
    if n < 2:
        raise ConfigurationError(f'Saltelli design needs N >= 2, got {n}')
    p = space.dim
    sampler = qmc.Sobol(d=2 * p, scramble=True, seed=derive_seed(seed, _STREAM_SALTELLI))
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', UserWarning)
        base = sampler.random(n)
    a = space.from_unit(base[:, :p])
    b = space.from_unit(base[:, p:])
    ab = np.repeat(a[None], p, axis=0)
    ba = np.repeat(b[None], p, axis=0)
    for i in range(p):
        ab[i, :, i] = b[:, i]
        ba[i, :, i] = a[:, i]
    return SaltelliDesign(space, a, b, ab, ba)


def extract_qois_batch(states: np.ndarray, times: np.ndarray) -> np.ndarray:
    """QoIs of physical state arrays shaped (B, n_times, >= 8); returns (B, 32)."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 3 or states.shape[1] < 3 or states.shape[2] < N_PHYSICAL:
        raise InputShapeError(
            f'Need (batch, >= 3 times, >= {N_PHYSICAL} states), got {states.shape}'
        )
    physical = states[..., :N_PHYSICAL]
    rates = np.gradient(physical, times, axis=1)
    out = np.empty((states.shape[0], len(QOI_LABELS)))
    col = 0
    for chamber_idx in range(len(CHAMBERS)):
        pressure = chamber_idx
        volume = chamber_idx + len(CHAMBERS)
        traces = (
            physical[..., pressure],
            physical[..., volume],
            rates[..., pressure],
            rates[..., volume],
        )
        for trace in traces:
            out[:, col] = trace.max(axis=1)
            out[:, col + 1] = trace.min(axis=1)
            col += 2
    return out


def extract_qois(traj: Trajectory) -> np.ndarray:
    """32 labeled extrema, ordered as `QOI_LABELS`."""
    return extract_qois_batch(traj.states[None], traj.times)[0]


def qoi_dict(values: np.ndarray) -> dict[str, float]:
    return {label: float(v) for label, v in zip(QOI_LABELS, values)}


def _model_qois(
    thetas: np.ndarray, model: LnodeModel, z0: np.ndarray, av_delay: Optional[float]
) -> np.ndarray:
    # the grid depends on the period only; the delay enters through each row's phase
    ctx = model.cycle(av_delay)
    zhat0 = np.repeat(model.normalize_state(z0)[None], thetas.shape[0], axis=0)
    roll = rollout(
        model,
        zhat0,
        model.parameter_space.normalize(thetas),
        model.row_delays(thetas, av_delay),
        ctx,
        keep_memory=False,
    )
    states = model.denormalize_state(roll.states)
    return extract_qois_batch(states, ctx.times)


def evaluate_design(
    model: LnodeModel,
    design: SaltelliDesign,
    z0: Optional[np.ndarray] = None,
    av_delay: Optional[float] = None,
    pool: WorkerPool = SERIAL,
) -> np.ndarray:
    """
    Surrogate QoIs at every design row, shaped (n_evals, 32). The initial state defaults to the
    model's reference state. A model parameterized by `AV_delay` takes each row's own delay;
    otherwise every row uses `av_delay`, by default the training delay.
    """
    if design.space.names != model.parameter_space.names:
        raise ConfigurationError(
            f'Design parameters {design.space.names} differ from the model\'s '
            f'{model.parameter_space.names}'
        )
    if z0 is None:
        z0 = np.concatenate([model.z0_reference, model.latent_ic])
    if av_delay is not None and AV_DELAY in design.space.names:
        logger.warning('Ignoring av_delay=%s; the design varies %s', av_delay, AV_DELAY)
    rows = design.rows
    logger.info('Evaluating %d Saltelli rows', rows.shape[0])
    parts = pool.map(
        partial(_model_qois, model=model, z0=np.asarray(z0, dtype=np.float64), av_delay=av_delay),
        chunks(rows, _EVAL_CHUNK),
    )
    return np.concatenate(parts)


def evaluate_function(
    fn: Callable[[np.ndarray], np.ndarray], design: SaltelliDesign
) -> np.ndarray:
    values = np.asarray(fn(design.rows), dtype=np.float64)
    return values.reshape(values.shape[0], -1)


@dataclass(frozen=True, eq=False)
class SobolResult:
    parameter_names: tuple[str, ...]
    qoi_labels: tuple[str, ...]
    s1: np.ndarray
    st: np.ndarray
    s1_ci: np.ndarray
    st_ci: np.ndarray
    degenerate: np.ndarray
    n_base: int

    def write_csv(self, directory: Union[str, Path]) -> tuple[Path, Path]:
        """`s1.csv` and `st.csv` with their intervals, plus `sobol.json` for N and the flags."""
        directory = Path(directory)
        paths = (directory / 's1.csv', directory / 'st.csv')
        for path, values, ci in zip(paths, (self.s1, self.st), (self.s1_ci, self.st_ci)):
            _write_index_table(path, self.parameter_names, self.qoi_labels, values, ci)
        meta = {
            'n_base': self.n_base,
            'degenerate': [q for q, flag in zip(self.qoi_labels, self.degenerate) if flag],
        }
        (directory / 'sobol.json').write_text(json.dumps(meta, indent=2))
        return paths

    @classmethod
    def read_csv(cls, directory: Union[str, Path]) -> SobolResult:
        directory = Path(directory)
        names, labels, s1, s1_ci = _read_index_table(directory / 's1.csv')
        _, _, st, st_ci = _read_index_table(directory / 'st.csv')
        try:
            meta = json.loads((directory / 'sobol.json').read_text())
            flagged = set(meta['degenerate'])
            n_base = int(meta['n_base'])
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f'Could not read {directory / "sobol.json"}: {exc}') from exc
        degenerate = np.array([q in flagged for q in labels], dtype=bool)
        return cls(names, labels, s1, st, s1_ci, st_ci, degenerate, n_base)


def _write_index_table(
    path: Path,
    names: Sequence[str],
    labels: Sequence[str],
    values: np.ndarray,
    ci: np.ndarray,
) -> None:
    with path.open('w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ['parameter', *labels]
            + [f'{q}_ci_lo' for q in labels]
            + [f'{q}_ci_hi' for q in labels]
        )
        for i, name in enumerate(names):
            writer.writerow(
                [name, *map(repr, values[i].tolist())]
                + list(map(repr, ci[0, i].tolist()))
                + list(map(repr, ci[1, i].tolist()))
            )


def _read_index_table(
    path: Path,
) -> tuple[tuple[str, ...], tuple[str, ...], np.ndarray, np.ndarray]:
    try:
        with path.open(newline='') as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DatasetError(f'Could not read {path}: {exc}') from exc
    header, body = rows[0], rows[1:]
    n_q = (len(header) - 1) // 3
    labels = tuple(header[1 : 1 + n_q])
    table = np.array([[float(v) for v in row[1:]] for row in body])
    ci = np.stack([table[:, n_q : 2 * n_q], table[:, 2 * n_q :]])
    return tuple(row[0] for row in body), labels, table[:, :n_q], ci


def _estimate(
    f_a: np.ndarray, f_b: np.ndarray, f_ab: np.ndarray, f_ba: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    First-order (Saltelli 2010) and total (Jansen) estimates averaged over the A- and B-based
    forms. f_a, f_b are (N, Q); f_ab, f_ba are (P, N, Q). Returns S1, ST as (P, Q) and the
    zero-variance mask (Q,).
    """
    base = np.concatenate([f_a, f_b])
    variance = np.var(base, axis=0)
    # spread at rounding level relative to the QoI's magnitude carries no signal
    degenerate = variance <= np.maximum(_EPS * np.mean(base, axis=0) ** 2, 1e-300)
    safe = np.where(degenerate, 1.0, variance)
    s1_a = np.mean(f_b * (f_ab - f_a), axis=1)
    s1_b = np.mean(f_a * (f_ba - f_b), axis=1)
    st_a = 0.5 * np.mean((f_a - f_ab) ** 2, axis=1)
    st_b = 0.5 * np.mean((f_b - f_ba) ** 2, axis=1)
    s1 = np.where(degenerate, 0.0, 0.5 * (s1_a + s1_b) / safe)
    st = np.where(degenerate, 0.0, 0.5 * (st_a + st_b) / safe)
    return s1, st, degenerate


def sobol_indices(
    design: SaltelliDesign,
    evals: np.ndarray,
    n_bootstrap: int = 1000,
    seed: int = 0,
    labels: Optional[Sequence[str]] = None,
) -> SobolResult:
    n, p = design.n, design.space.dim
    evals = np.asarray(evals, dtype=np.float64)
    if evals.ndim == 1:
        evals = evals[:, None]
    if evals.shape[0] != design.n_evals:
        raise InputShapeError(f'Expected {design.n_evals} evaluations, got {evals.shape[0]}')
    if not np.isfinite(evals).all():
        raise ConfigurationError('Evaluations contain non-finite values')
    q = evals.shape[1]
    f_a, f_b = evals[:n], evals[n : 2 * n]
    f_ab = evals[2 * n : (2 + p) * n].reshape(p, n, q)
    f_ba = evals[(2 + p) * n :].reshape(p, n, q)
    s1, st, degenerate = _estimate(f_a, f_b, f_ab, f_ba)

    rng = make_rng(seed, _STREAM_BOOTSTRAP)
    boot_s1 = np.empty((n_bootstrap, p, q))
    boot_st = np.empty((n_bootstrap, p, q))
    for r in range(n_bootstrap):
        idx = rng.integers(0, n, n)
        boot_s1[r], boot_st[r], _ = _estimate(f_a[idx], f_b[idx], f_ab[:, idx], f_ba[:, idx])
    if n_bootstrap:
        s1_ci = np.percentile(boot_s1, [2.5, 97.5], axis=0)
        st_ci = np.percentile(boot_st, [2.5, 97.5], axis=0)
    else:
        s1_ci = np.stack([s1, s1])
        st_ci = np.stack([st, st])

    labels = tuple(labels) if labels is not None else tuple(f'q{j}' for j in range(q))
    if len(labels) != q:
        raise InputShapeError(f'{len(labels)} labels for {q} outputs')
    for label in np.asarray(labels)[degenerate]:
        logger.warning('QoI %s has zero variance; its indices are reported as 0', label)
    return SobolResult(design.space.names, labels, s1, st, s1_ci, st_ci, degenerate, n)
