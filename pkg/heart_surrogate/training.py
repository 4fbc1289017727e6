from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Any, NamedTuple, Optional, Sequence, Union

import numpy as np

from heart_surrogate.ann import AnnArchitecture, init_glorot
from heart_surrogate.dataset import Dataset, TrainingSample
from heart_surrogate.errors import ConfigurationError, DivergenceError
from heart_surrogate.lnode import (
    N_PHYSICAL,
    PHYSICAL_LABELS,
    CycleContext,
    LnodeModel,
    Trajectory,
    assemble_initial_state,
    rollout,
    rollout_vjp,
)
from heart_surrogate.optim import Adam, lbfgs
from heart_surrogate.parallel import SERIAL, WorkerPool, chunks
from heart_surrogate.parameters import ParameterSpace
from heart_surrogate.utils import make_rng

logger = logging.getLogger(__name__)

_STREAM_FOLDS = 21
_STREAM_HYPER = 22
RUNG_FRACTIONS = (0.25, 0.5, 1.0)


@dataclass(frozen=True, eq=False)
class LossNormalization:
    """Per physical state scales of the trajectory, derivative and extremum terms."""

    z_norm: np.ndarray
    z_norm_diff: np.ndarray
    z_norm_max: np.ndarray
    z_norm_min: np.ndarray

    def __post_init__(self) -> None:
        for name in ('z_norm', 'z_norm_diff', 'z_norm_max', 'z_norm_min'):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.shape != (N_PHYSICAL,) or np.any(value <= 0):
                raise ConfigurationError(f'`{name}` needs {N_PHYSICAL} positive entries')
            object.__setattr__(self, name, value)

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> LossNormalization:
        center, half_range = state_statistics(dataset)
        t_hb = dataset.shared_period()
        return cls(half_range, half_range / t_hb, half_range.copy(), half_range.copy())


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.1
    eta: float = 0.1
    iota: float = 1e-4
    dt_ref: float = 0.0285
    normalization: Optional[LossNormalization] = None

    def __post_init__(self) -> None:
        for name in ('alpha', 'beta', 'gamma', 'eta', 'iota'):
            if getattr(self, name) < 0:
                raise ConfigurationError(f'Loss weight `{name}` must be >= 0, got {self!r}')
        if not self.dt_ref > 0:
            raise ConfigurationError(f'`dt_ref` must be positive, got {self.dt_ref}')

    @property
    def scales(self) -> LossNormalization:
        if self.normalization is None:
            raise ConfigurationError('Loss normalization constants were not computed')
        return self.normalization


@dataclass(frozen=True)
class HyperConfig:
    layers: int = 3
    neurons: int = 13
    num_states: int = 8
    dt_ref: float = 0.0285
    iota: float = 1e-4

    def __post_init__(self) -> None:
        HyperSpace().validate(self)


@dataclass(frozen=True)
class HyperSpace:
    layers: tuple[int, int] = (1, 7)
    neurons: tuple[int, int] = (5, 50)
    num_states: tuple[int, int] = (8, 12)
    dt_ref: tuple[float, float] = (1e-3, 0.1)
    iota: tuple[float, float] = (1e-4, 1.0)

    def __post_init__(self) -> None:
        for name, (lo, hi) in asdict(self).items():
            if lo > hi:
                raise ConfigurationError(f'Empty range for `{name}`: [{lo}, {hi}]')
        if self.num_states[0] < N_PHYSICAL or self.layers[0] < 1 or self.neurons[0] < 1:
            raise ConfigurationError(f'Hyperparameter space out of bounds: {self!r}')

    def validate(self, hyper: HyperConfig) -> None:
        for name, (lo, hi) in asdict(self).items():
            value = getattr(hyper, name)
            if not lo <= value <= hi:
                raise ConfigurationError(f'`{name}` = {value} outside [{lo}, {hi}]')

    def sample(self, rng: np.random.Generator) -> HyperConfig:
        lo_iota, hi_iota = np.log(self.iota[0]), np.log(self.iota[1])
        return HyperConfig(
            layers=int(rng.integers(self.layers[0], self.layers[1] + 1)),
            neurons=int(rng.integers(self.neurons[0], self.neurons[1] + 1)),
            num_states=int(rng.integers(self.num_states[0], self.num_states[1] + 1)),
            dt_ref=float(rng.uniform(*self.dt_ref)),
            iota=float(np.exp(rng.uniform(lo_iota, hi_iota))),
        )


@dataclass(frozen=True)
class TrainSettings:
    adam_iters: int = 1000
    lr: float = 1e-2
    bfgs_iters: int = 10000
    max_restarts: int = 2
    dt: float = 1e-3
    valid_every: int = 10
    chunk_size: int = 8
    loss: LossConfig = LossConfig()

    def __post_init__(self) -> None:
        if self.adam_iters < 0 or self.bfgs_iters < 0 or self.max_restarts < 0:
            raise ConfigurationError(f'Iteration counts must be >= 0, got {self!r}')
        if self.valid_every < 1 or self.chunk_size < 1:
            raise ConfigurationError(f'`valid_every` and `chunk_size` must be >= 1, got {self!r}')

    def scaled(self, fraction: float) -> TrainSettings:
        return replace(
            self,
            adam_iters=max(1, math.ceil(self.adam_iters * fraction)) if self.adam_iters else 0,
            bfgs_iters=max(1, math.ceil(self.bfgs_iters * fraction)) if self.bfgs_iters else 0,
        )


class HistoryRow(NamedTuple):
    iteration: int
    phase: str
    train_loss: float
    valid_loss: float


@dataclass
class FitReport:
    split: str
    n_samples: int
    nrmse: dict[str, float]
    r2: dict[str, float]
    history: list[HistoryRow] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            'split': self.split,
            'n_samples': self.n_samples,
            'nrmse': self.nrmse,
            'r2_percent': self.r2,
            'final_train_loss': self.history[-1].train_loss if self.history else None,
        }

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    def write_history(self, path: Union[str, Path]) -> None:
        with Path(path).open('w', newline='') as fh:
            writer = csv.writer(fh)
            writer.writerow(HistoryRow._fields)
            for row in self.history:
                writer.writerow(
                    [row.iteration, row.phase, repr(row.train_loss), repr(row.valid_loss)]
                )


def state_statistics(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Mid-range and half-range of every physical trace over the whole dataset."""
    if not len(dataset):
        raise ConfigurationError('Dataset is empty')
    stacked = np.concatenate([s.states for s in dataset.samples])
    lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    half_range = 0.5 * (hi - lo)
    half_range = np.where(half_range > 1e-12, half_range, 1.0)
    return 0.5 * (hi + lo), half_range


def init_model(
    dataset: Dataset, hyper: HyperConfig, seed: int, dt: float = 1e-3
) -> LnodeModel:
    n_latent = hyper.num_states - N_PHYSICAL
    space = dataset.space
    arch = AnnArchitecture(
        input_dim=hyper.num_states + 2 + space.dim,
        hidden_layers=hyper.layers,
        neurons_per_layer=hyper.neurons,
        output_dim=hyper.num_states,
    )
    center, half_range = state_statistics(dataset)
    z0 = np.stack([s.initial_state for s in dataset.samples])
    return LnodeModel(
        weights=init_glorot(arch, seed),
        parameter_space=space,
        state_center=np.concatenate([center, np.zeros(n_latent)]),
        state_scale=np.concatenate([half_range, np.ones(n_latent)]),
        latent_ic=np.zeros(n_latent),
        t_hb=dataset.shared_period(),
        dt=dt,
        z0_reference=z0.mean(axis=0),
        default_av_delay=float(np.mean([s.av_delay for s in dataset.samples])),
        seed=seed,
    )


def reference_grid(t_hb: float, dt_ref: float) -> np.ndarray:
    m = max(1, math.ceil(t_hb / dt_ref - 1e-9))
    return np.append(np.arange(m) * dt_ref, t_hb)


@dataclass(frozen=True, eq=False)
class PreparedBatch:
    """Samples sharing one cycle with targets resampled onto the loss grid."""

    context: CycleContext
    space: ParameterSpace
    sample_ids: tuple[str, ...]
    z0: np.ndarray
    theta_norm: np.ndarray
    av_delay: np.ndarray
    tau: np.ndarray
    interp_index: np.ndarray
    interp_frac: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.sample_ids)

    def take(self, rows: slice) -> PreparedBatch:
        return replace(
            self,
            sample_ids=self.sample_ids[rows],
            z0=self.z0[rows],
            theta_norm=self.theta_norm[rows],
            av_delay=self.av_delay[rows],
            targets=self.targets[rows],
        )

    def split(self, size: int) -> list[PreparedBatch]:
        return [self.take(slice(i, i + size)) for i in range(0, len(self), size)]


def prepare_batch(
    samples: Sequence[TrainingSample], space: ParameterSpace, dt_ref: float, dt: float = 1e-3
) -> PreparedBatch:
    if not samples:
        raise ConfigurationError('Cannot prepare an empty batch')
    periods = {s.t_hb for s in samples}
    if len(periods) != 1:
        raise ConfigurationError(f'Batch samples must share one heartbeat period, got {periods}')
    t_hb = periods.pop()
    ctx = CycleContext(t_hb, 0.0, dt)
    if dt_ref < dt:
        raise ConfigurationError(f'Loss step {dt_ref} is finer than the integration step {dt}')
    times = ctx.times
    tau = reference_grid(t_hb, dt_ref)
    index = np.clip(np.searchsorted(times, tau, side='right') - 1, 0, len(times) - 2)
    frac = np.clip((tau - times[index]) / (times[index + 1] - times[index]), 0.0, 1.0)
    targets = np.stack(
        [
            np.column_stack([np.interp(tau, s.times, s.states[:, i]) for i in range(N_PHYSICAL)])
            for s in samples
        ]
    )
    return PreparedBatch(
        context=ctx,
        space=space,
        sample_ids=tuple(s.sample_id for s in samples),
        z0=np.stack([s.initial_state for s in samples]),
        theta_norm=space.normalize(np.stack([s.theta for s in samples])),
        av_delay=np.array([s.av_delay for s in samples]),
        tau=tau,
        interp_index=index,
        interp_frac=frac,
        targets=targets,
    )


def _sample_terms(
    pred: np.ndarray, target: np.ndarray, tau: np.ndarray, cfg: LossConfig
) -> tuple[np.ndarray, np.ndarray]:
    """
    Trajectory, derivative and extremum terms of every sample, plus their gradient with
    respect to the predictions on the loss grid. `pred` and `target` are (B, m+1, 8).
    """
    scales = cfg.scales
    t_hb = tau[-1]
    w = np.diff(tau)[None, :, None]
    n_batch = pred.shape[0]
    rows = np.arange(n_batch)[:, None]
    cols = np.arange(N_PHYSICAL)[None, :]

    r = (pred - target) / scales.z_norm
    l2 = np.sum(w * r[:, :-1] ** 2, axis=(1, 2)) / (N_PHYSICAL * t_hb)
    g = np.zeros_like(pred)
    g[:, :-1] += 2.0 * w * r[:, :-1] / scales.z_norm / (N_PHYSICAL * t_hb)

    d = (np.diff(pred, axis=1) - np.diff(target, axis=1)) / (w * scales.z_norm_diff)
    diff = np.sum(w * d**2, axis=(1, 2)) / (N_PHYSICAL * t_hb)
    g_step = 2.0 * d / scales.z_norm_diff / (N_PHYSICAL * t_hb)
    g[:, 1:] += cfg.alpha * g_step
    g[:, :-1] -= cfg.alpha * g_step

    arg_max = np.argmax(pred, axis=1)
    e_max = (pred.max(axis=1) - target.max(axis=1)) / scales.z_norm_max
    g[rows, arg_max, cols] += cfg.beta * 2.0 * e_max / scales.z_norm_max / N_PHYSICAL
    arg_min = np.argmin(pred, axis=1)
    e_min = (pred.min(axis=1) - target.min(axis=1)) / scales.z_norm_min
    g[rows, arg_min, cols] += cfg.gamma * 2.0 * e_min / scales.z_norm_min / N_PHYSICAL

    value = (
        l2
        + cfg.alpha * diff
        + cfg.beta * np.sum(e_max**2, axis=1) / N_PHYSICAL
        + cfg.gamma * np.sum(e_min**2, axis=1) / N_PHYSICAL
    )
    return value, g


def _chunk_loss(
    trainable: np.ndarray,
    batch: PreparedBatch,
    model: LnodeModel,
    cfg: LossConfig,
    with_grad: bool = True,
) -> tuple[float, np.ndarray]:
    """Summed (not averaged) data terms of one chunk and their trainable-vector gradient."""
    model = model.with_trainable(trainable)
    center = model.state_center[:N_PHYSICAL]
    scale = model.state_scale[:N_PHYSICAL]
    zhat0 = np.concatenate(
        [(batch.z0 - center) / scale, np.tile(model.latent_ic, (len(batch), 1))], axis=1
    )
    roll = rollout(
        model,
        zhat0,
        batch.theta_norm,
        batch.av_delay,
        batch.context,
        keep_memory=with_grad,
        sample_ids=batch.sample_ids,
    )
    k, lam = batch.interp_index, batch.interp_frac[None, :, None]
    zhat_tau = (1.0 - lam) * roll.states[:, k] + lam * roll.states[:, k + 1]
    pred = center + scale * zhat_tau[..., :N_PHYSICAL]
    values, g_pred = _sample_terms(pred, batch.targets, batch.tau, cfg)

    latent_end = roll.states[:, -1, N_PHYSICAL:]
    values = values + cfg.eta * (np.sum(model.latent_ic**2) + np.sum(latent_end**2, axis=1))
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise DivergenceError('Non-finite loss', sample_id=batch.sample_ids[bad[0]])
    if not with_grad:
        return float(values.sum()), np.empty(0)

    cot = np.zeros_like(roll.states)
    g_zhat = g_pred * scale
    np.add.at(cot, (slice(None), k, slice(0, N_PHYSICAL)), (1.0 - lam) * g_zhat)
    np.add.at(cot, (slice(None), k + 1, slice(0, N_PHYSICAL)), lam * g_zhat)
    cot[:, -1, N_PHYSICAL:] += 2.0 * cfg.eta * latent_end
    grad_w, grad_z0, _ = rollout_vjp(model, roll, cot)
    grad_latent = grad_z0[:, N_PHYSICAL:].sum(axis=0)
    grad_latent += 2.0 * cfg.eta * len(batch) * model.latent_ic
    return float(values.sum()), np.concatenate([grad_w, grad_latent])


def _run_chunk(
    batch: PreparedBatch,
    trainable: np.ndarray,
    model: LnodeModel,
    cfg: LossConfig,
    with_grad: bool,
) -> tuple[float, np.ndarray]:
    return _chunk_loss(trainable, batch, model, cfg, with_grad)


def loss(
    model: LnodeModel,
    batch: Union[PreparedBatch, Sequence[TrainingSample]],
    cfg: LossConfig,
    pool: WorkerPool = SERIAL,
    chunk_size: int = 8,
    include_regularization: bool = True,
    with_grad: bool = True,
) -> tuple[float, np.ndarray]:
    """
    Composite trajectory loss averaged over the batch plus the weight penalty.

    The gradient covers the optimizer's trainable vector: network weights followed by the latent
    initial condition. Chunks are reduced in sample order whatever the worker count.
    """
    if not isinstance(batch, PreparedBatch):
        batch = prepare_batch(batch, model.parameter_space, cfg.dt_ref, model.dt)
    trainable = model.trainable
    results = pool.map(
        partial(_run_chunk, trainable=trainable, model=model, cfg=cfg, with_grad=with_grad),
        batch.split(chunk_size),
    )
    value = sum(r[0] for r in results) / len(batch)
    grad = np.zeros_like(trainable)
    if with_grad:
        for _, g in results:
            grad += g
        grad /= len(batch)
    if include_regularization and cfg.iota:
        w = model.weights.flat
        value += cfg.iota * float(w @ w)
        if with_grad:
            grad[: w.size] += 2.0 * cfg.iota * w
    if not np.isfinite(value):
        raise DivergenceError('Non-finite loss')
    return value, grad


def loss_value(
    model: LnodeModel,
    batch: PreparedBatch,
    cfg: LossConfig,
    pool: WorkerPool = SERIAL,
    chunk_size: int = 8,
    include_regularization: bool = False,
) -> float:
    value, _ = loss(
        model, batch, cfg, pool, chunk_size, include_regularization=include_regularization,
        with_grad=False,
    )
    return value


def train(
    dataset: Dataset,
    hyper: HyperConfig = HyperConfig(),
    seed: int = 0,
    settings: TrainSettings = TrainSettings(),
    validation: Optional[Dataset] = None,
    pool: WorkerPool = SERIAL,
) -> tuple[LnodeModel, FitReport]:
    """
    Adam followed by limited-memory BFGS; returns the checkpoint with the lowest validation loss
    (training loss when no validation set is given).
    """
    if not len(dataset):
        raise ConfigurationError('Cannot train on an empty dataset')
    dataset.shared_period()
    cfg = replace(
        settings.loss,
        iota=hyper.iota,
        dt_ref=hyper.dt_ref,
        normalization=LossNormalization.from_dataset(dataset),
    )
    batch = prepare_batch(dataset.samples, dataset.space, cfg.dt_ref, settings.dt)
    valid_batch = (
        prepare_batch(validation.samples, dataset.space, cfg.dt_ref, settings.dt)
        if validation is not None and len(validation)
        else None
    )
    history: list[HistoryRow] = []
    best: dict[str, Any] = {'score': np.inf, 'trainable': None}
    base = init_model(dataset, hyper, seed, settings.dt)

    def value_and_grad(model: LnodeModel) -> tuple[float, np.ndarray]:
        return loss(model, batch, cfg, pool, settings.chunk_size)

    def checkpoint(model: LnodeModel, iteration: int, phase: str, train_loss: float) -> None:
        valid = np.nan
        if valid_batch is not None:
            try:
                valid = loss_value(model, valid_batch, cfg, pool, settings.chunk_size)
            except DivergenceError:
                valid = np.inf
        score = valid if valid_batch is not None else train_loss
        if score < best['score']:
            best.update(score=score, trainable=model.trainable)
        history.append(HistoryRow(iteration, phase, train_loss, valid))
        logger.debug('%s %d: train %.6e valid %.6e', phase, iteration, train_loss, valid)

    model = base
    for attempt in range(settings.max_restarts + 1):
        lr = settings.lr / 10**attempt
        adam = Adam(lr=lr)
        model = base
        history.clear()
        best.update(score=np.inf, trainable=None)
        try:
            params = model.trainable
            for it in range(settings.adam_iters):
                value, grad = value_and_grad(model)
                if it % settings.valid_every == 0:
                    checkpoint(model, it, 'adam', value)
                else:
                    history.append(HistoryRow(it, 'adam', value, np.nan))
                params = adam.step(params, grad)
                model = model.with_trainable(params)
            break
        except DivergenceError as exc:
            if attempt == settings.max_restarts:
                raise
            logger.warning('Adam diverged at lr=%g (%s); restarting with lr=%g', lr, exc, lr / 10)

    value, _ = value_and_grad(model)
    checkpoint(model, settings.adam_iters, 'adam', value)
    logger.info('Adam finished: loss %.6e', value)

    def objective(x: np.ndarray) -> tuple[float, np.ndarray]:
        return value_and_grad(model.with_trainable(x))

    def on_iteration(it: int, x: np.ndarray, f: float) -> None:
        if it % settings.valid_every == 0 or it == settings.bfgs_iters:
            checkpoint(model.with_trainable(x), it, 'bfgs', f)
        else:
            history.append(HistoryRow(it, 'bfgs', f, np.nan))

    result = lbfgs(
        objective, model.trainable, settings.bfgs_iters, label='bfgs', on_iteration=on_iteration
    )
    final = model.with_trainable(result.x)
    checkpoint(final, result.n_iter, 'bfgs', result.fun)
    logger.info(
        'BFGS finished after %d iterations: loss %.6e (%s)',
        result.n_iter,
        result.fun,
        result.message,
    )

    best_model = final if best['trainable'] is None else model.with_trainable(best['trainable'])
    if valid_batch is not None:
        report = evaluate(best_model, validation, pool, split='valid')
    else:
        report = evaluate(best_model, dataset, pool, split='train')
    report.history = list(history)
    return best_model, report


def kfold_split(n_samples: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    if k < 2:
        raise ConfigurationError(f'K-fold needs K >= 2, got {k}')
    if k > n_samples:
        raise ConfigurationError(f'K = {k} exceeds the dataset size {n_samples}')
    order = make_rng(seed, _STREAM_FOLDS).permutation(n_samples)
    folds = np.array_split(order, k)
    return [
        (np.sort(np.concatenate(folds[:i] + folds[i + 1 :])), np.sort(fold))
        for i, fold in enumerate(folds)
    ]


def _fold_score(
    fold: tuple[np.ndarray, np.ndarray],
    dataset: Dataset,
    hyper: HyperConfig,
    seed: int,
    settings: TrainSettings,
) -> float:
    train_idx, valid_idx = fold
    train_set, valid_set = dataset.subset(train_idx), dataset.subset(valid_idx)
    try:
        model, _ = train(train_set, hyper, seed, settings, validation=valid_set)
    except DivergenceError as exc:
        logger.warning('Fold training diverged for %s: %s', hyper, exc)
        return math.inf
    cfg = replace(
        settings.loss,
        dt_ref=hyper.dt_ref,
        normalization=LossNormalization.from_dataset(train_set),
    )
    batch = prepare_batch(valid_set.samples, dataset.space, cfg.dt_ref, settings.dt)
    try:
        return loss_value(model, batch, cfg, chunk_size=settings.chunk_size)
    except DivergenceError:
        return math.inf


def fold_scores(
    dataset: Dataset,
    hyper: HyperConfig,
    k: int,
    seed: int,
    settings: TrainSettings = TrainSettings(),
    pool: WorkerPool = SERIAL,
) -> list[float]:
    """Validation loss of every fold, without the weight penalty."""
    folds = kfold_split(len(dataset), k, seed)
    return pool.map(
        partial(_fold_score, dataset=dataset, hyper=hyper, seed=seed, settings=settings), folds
    )


def cross_validate(
    dataset: Dataset,
    hyper: HyperConfig,
    k: int,
    seed: int,
    settings: TrainSettings = TrainSettings(),
    pool: WorkerPool = SERIAL,
) -> float:
    """Mean validation loss over the folds."""
    return float(np.mean(fold_scores(dataset, hyper, k, seed, settings, pool)))


def holdout_split(dataset: Dataset, k: int, seed: int) -> tuple[Dataset, Dataset]:
    """The first of the K folds as validation set, the other K - 1 for fitting."""
    train_idx, valid_idx = kfold_split(len(dataset), k, seed)[0]
    return dataset.subset(train_idx), dataset.subset(valid_idx)


class SearchRow(NamedTuple):
    config_id: int
    rung: int
    fraction: float
    hyper: HyperConfig
    score: float


def hyper_search(
    space: HyperSpace,
    budget: int,
    dataset: Dataset,
    seed: int,
    settings: TrainSettings = TrainSettings(),
    k: int = 10,
    pool: WorkerPool = SERIAL,
) -> tuple[HyperConfig, list[SearchRow]]:
    """
    Random search over `space` pruned by synchronous successive halving: every rung trains with a
    growing share of the iteration budget and keeps the best third.
    """
    if budget < 1:
        raise ConfigurationError(f'Search budget must be >= 1, got {budget}')
    configs = [space.sample(make_rng(seed, _STREAM_HYPER, i)) for i in range(budget)]
    alive = list(range(budget))
    table: list[SearchRow] = []
    scores: dict[int, float] = {}
    for rung, fraction in enumerate(RUNG_FRACTIONS):
        final = rung == len(RUNG_FRACTIONS) - 1 or len(alive) == 1
        if final:
            fraction = 1.0
        rung_settings = settings.scaled(fraction)
        for idx in alive:
            scores[idx] = cross_validate(dataset, configs[idx], k, seed, rung_settings, pool)
            table.append(SearchRow(idx, rung, fraction, configs[idx], scores[idx]))
            logger.info('Rung %d config %d %s: CV loss %.6e', rung, idx, configs[idx], scores[idx])
        if final:
            break
        ranked = sorted(alive, key=lambda i: (scores[i], i))
        alive = ranked[: max(1, math.ceil(len(ranked) / 3))]
    winner = min(alive, key=lambda i: (scores[i], i))
    return configs[winner], table


def write_search_table(rows: Sequence[SearchRow], path: Union[str, Path]) -> None:
    with Path(path).open('w', newline='') as fh:
        writer = csv.writer(fh)
        header = ['config_id', 'rung', 'fraction', *HyperConfig.__dataclass_fields__, 'score']
        writer.writerow(header)
        for row in rows:
            hyper = asdict(row.hyper).values()
            writer.writerow([row.config_id, row.rung, row.fraction, *hyper, repr(row.score)])


def _predict_group(
    samples: Sequence[TrainingSample], model: LnodeModel
) -> list[Trajectory]:
    ctx = CycleContext(samples[0].t_hb, 0.0, model.dt)
    z0 = np.stack([model.normalize_state(assemble_initial_state(s, model)) for s in samples])
    roll = rollout(
        model,
        z0,
        model.parameter_space.normalize(np.stack([s.theta for s in samples])),
        np.array([s.av_delay for s in samples]),
        ctx,
        keep_memory=False,
        sample_ids=[s.sample_id for s in samples],
    )
    out = []
    for sample, states in zip(samples, roll.states):
        physical = model.denormalize_state(states)
        resampled = np.column_stack(
            [np.interp(sample.times, ctx.times, physical[:, i]) for i in range(model.n_states)]
        )
        out.append(Trajectory(sample.trajectory.context, sample.times, resampled, model.labels))
    return out


def predict(
    model: LnodeModel, samples: Sequence[TrainingSample], pool: WorkerPool = SERIAL
) -> list[Trajectory]:
    """Surrogate trajectories of every sample, on the sample's own time grid."""
    groups: dict[float, list[int]] = {}
    for idx, sample in enumerate(samples):
        groups.setdefault(sample.t_hb, []).append(idx)
    predictions: list[Optional[Trajectory]] = [None] * len(samples)
    for indices in groups.values():
        parts = chunks(indices, 16)
        results = pool.map(
            partial(_predict_group, model=model), [[samples[i] for i in part] for part in parts]
        )
        for part, trajs in zip(parts, results):
            for i, traj in zip(part, trajs):
                predictions[i] = traj
    return [p for p in predictions if p is not None]


def fit_metrics(
    predictions: Sequence[np.ndarray], targets: Sequence[np.ndarray]
) -> tuple[dict[str, float], dict[str, float]]:
    pred = np.concatenate([np.asarray(p)[:, :N_PHYSICAL] for p in predictions])
    true = np.concatenate([np.asarray(t)[:, :N_PHYSICAL] for t in targets])
    nrmse, r2 = {}, {}
    for i, label in enumerate(PHYSICAL_LABELS):
        err = pred[:, i] - true[:, i]
        ss_res = float(err @ err)
        rmse = math.sqrt(ss_res / err.size)
        span = float(true[:, i].max() - true[:, i].min())
        ss_tot = float(np.sum((true[:, i] - true[:, i].mean()) ** 2))
        nrmse[label] = rmse / span if span > 0 else (0.0 if rmse == 0 else math.inf)
        if ss_tot > 0:
            r2[label] = 100.0 * (1.0 - ss_res / ss_tot)
        else:
            r2[label] = 100.0 if ss_res == 0 else -math.inf
    return nrmse, r2


def evaluate(
    model: LnodeModel, testset: Dataset, pool: WorkerPool = SERIAL, split: str = 'test'
) -> FitReport:
    predictions = predict(model, testset.samples, pool)
    nrmse, r2 = fit_metrics(
        [p.states for p in predictions], [s.states for s in testset.samples]
    )
    logger.info('%s NRMSE %s', split, {k: round(v, 5) for k, v in nrmse.items()})
    return FitReport(split, len(testset), nrmse, r2)
