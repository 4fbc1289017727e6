"""
No-U-Turn Hamiltonian Monte Carlo with multinomial trajectory sampling, identity mass matrix
and dual-averaging step size adaptation during burn-in, plus split-R̂ diagnostics.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from heart_surrogate.errors import ConfigurationError
from heart_surrogate.utils import make_rng

logger = logging.getLogger(__name__)

LogDensity = Callable[[np.ndarray], tuple[float, np.ndarray]]

_STREAM_NUTS = 41
MIN_RHAT_DRAWS = 100
RHAT_THRESHOLD = 1.1


@dataclass(frozen=True)
class NutsConfig:
    iters: int = 750
    burn_in: int = 250
    step_size: float = 1e-3
    max_tree_depth: int = 10
    adapt_step: bool = True
    target_accept: float = 0.8
    max_energy_error: float = 1000.0
    # chains with a larger share of divergent kept transitions are flagged invalid
    max_divergent_fraction: float = 0.1

    def __post_init__(self) -> None:
        if not 0 <= self.burn_in < self.iters:
            raise ConfigurationError(f'Need 0 <= burn_in < iters, got {self!r}')
        if self.step_size <= 0 or self.max_tree_depth < 1:
            raise ConfigurationError(f'Invalid leapfrog settings {self!r}')
        if not 0 < self.target_accept < 1:
            raise ConfigurationError(f'Target acceptance must lie in (0, 1), got {self!r}')


@dataclass
class DualAveraging:
    mu: float
    log_eps: float
    log_eps_bar: float = 0.0
    h_bar: float = 0.0
    t: int = 0

    def update(
        self,
        accept_stat: float,
        target: float,
        gamma: float = 0.05,
        t0: float = 10.0,
        kappa: float = 0.75,
    ) -> float:
        self.t += 1
        eta = 1.0 / (self.t + t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.t) / gamma * self.h_bar
        w = self.t ** (-kappa)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    def final(self) -> float:
        return math.exp(self.log_eps_bar)


@dataclass
class _Point:
    q: np.ndarray
    p: np.ndarray
    logp: float
    grad: np.ndarray


@dataclass
class _Tree:
    minus: _Point
    plus: _Point
    proposal: _Point
    log_weight: float
    p_sum: np.ndarray
    turning: bool = False
    divergent: bool = False
    accept_sum: float = 0.0
    n_leapfrog: int = 0


def _leapfrog(log_density: LogDensity, point: _Point, eps: float) -> _Point:
    p = point.p + 0.5 * eps * point.grad
    q = point.q + eps * p
    logp, grad = log_density(q)
    grad = np.asarray(grad, dtype=np.float64)
    return _Point(q, p + 0.5 * eps * grad, float(logp), grad)


def _is_turning(minus: _Point, plus: _Point, p_sum: np.ndarray) -> bool:
    return bool(p_sum @ minus.p <= 0 or p_sum @ plus.p <= 0)


def _build_tree(
    log_density: LogDensity,
    edge: _Point,
    direction: int,
    depth: int,
    eps: float,
    h0: float,
    cfg: NutsConfig,
    rng: np.random.Generator,
) -> _Tree:
    if depth == 0:
        new = _leapfrog(log_density, edge, direction * eps)
        h = -new.logp + 0.5 * float(new.p @ new.p)
        energy_error = h - h0 if np.isfinite(h) else math.inf
        divergent = energy_error > cfg.max_energy_error
        return _Tree(
            minus=new,
            plus=new,
            proposal=new,
            log_weight=-energy_error,
            p_sum=new.p.copy(),
            divergent=divergent,
            accept_sum=math.exp(min(0.0, -energy_error)),
            n_leapfrog=1,
        )

    first = _build_tree(log_density, edge, direction, depth - 1, eps, h0, cfg, rng)
    if first.turning or first.divergent:
        return first
    outer = first.plus if direction > 0 else first.minus
    second = _build_tree(log_density, outer, direction, depth - 1, eps, h0, cfg, rng)
    tree = _merge(first, second, direction)
    if second.turning or second.divergent:
        tree.turning = second.turning
        tree.divergent = second.divergent
        return tree
    log_weight = np.logaddexp(first.log_weight, second.log_weight)
    # uniform multinomial choice inside a subtree
    if math.log(rng.uniform()) < second.log_weight - log_weight:
        tree.proposal = second.proposal
    tree.log_weight = float(log_weight)
    tree.turning = _is_turning(tree.minus, tree.plus, tree.p_sum)
    return tree


def _merge(first: _Tree, second: _Tree, direction: int) -> _Tree:
    minus, plus = (first.minus, second.plus) if direction > 0 else (second.minus, first.plus)
    return _Tree(
        minus=minus,
        plus=plus,
        proposal=first.proposal,
        log_weight=first.log_weight,
        p_sum=first.p_sum + second.p_sum,
        accept_sum=first.accept_sum + second.accept_sum,
        n_leapfrog=first.n_leapfrog + second.n_leapfrog,
    )


@dataclass
class Transition:
    point: _Point
    accept_stat: float
    n_leapfrog: int
    depth: int
    divergent: bool


def nuts_transition(
    log_density: LogDensity,
    current: _Point,
    eps: float,
    cfg: NutsConfig,
    rng: np.random.Generator,
) -> Transition:
    p0 = rng.standard_normal(current.q.shape)
    start = _Point(current.q, p0, current.logp, current.grad)
    h0 = -current.logp + 0.5 * float(p0 @ p0)
    tree = _Tree(minus=start, plus=start, proposal=start, log_weight=0.0, p_sum=p0.copy())
    accept_sum, n_leapfrog, divergent, depth = 0.0, 0, False, 0
    for depth in range(cfg.max_tree_depth):
        direction = 1 if rng.uniform() < 0.5 else -1
        edge = tree.plus if direction > 0 else tree.minus
        sub = _build_tree(log_density, edge, direction, depth, eps, h0, cfg, rng)
        accept_sum += sub.accept_sum
        n_leapfrog += sub.n_leapfrog
        if sub.divergent:
            divergent = True
            break
        if sub.turning:
            break
        # biased progressive sampling favours the new subtree
        if math.log(rng.uniform()) < sub.log_weight - tree.log_weight:
            proposal = sub.proposal
        else:
            proposal = tree.proposal
        log_weight = float(np.logaddexp(tree.log_weight, sub.log_weight))
        tree = _merge(tree, sub, direction)
        tree.proposal = proposal
        tree.log_weight = log_weight
        if _is_turning(tree.minus, tree.plus, tree.p_sum):
            break
    accept = accept_sum / n_leapfrog if n_leapfrog else 0.0
    return Transition(tree.proposal, accept, n_leapfrog, depth + 1, divergent)


@dataclass
class PosteriorChain:
    names: tuple[str, ...]
    draws: np.ndarray
    burn_in: int
    n_total: int
    divergences: int
    burn_in_divergences: int
    step_size: float
    accept_rate: float
    max_divergent_fraction: float = 0.1
    tree_depths: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @property
    def n_kept(self) -> int:
        return self.draws.shape[0]

    @property
    def invalid(self) -> bool:
        return self.divergences > self.max_divergent_fraction * max(self.n_kept, 1)

    def summary(self, truth: Optional[np.ndarray] = None) -> dict[str, Any]:
        mean = self.draws.mean(axis=0)
        std = self.draws.std(axis=0, ddof=1) if self.n_kept > 1 else np.zeros(len(self.names))
        out: dict[str, Any] = {
            'names': list(self.names),
            'mean': mean.tolist(),
            'std': std.tolist(),
            'lower_2sigma': (mean - 2.0 * std).tolist(),
            'upper_2sigma': (mean + 2.0 * std).tolist(),
            'n_kept': self.n_kept,
            'burn_in': self.burn_in,
            'divergences': self.divergences,
            'burn_in_divergences': self.burn_in_divergences,
            'step_size': self.step_size,
            'accept_rate': self.accept_rate,
            'invalid': self.invalid,
        }
        with np.errstate(invalid='ignore', divide='ignore'):
            corr = np.corrcoef(self.draws, rowvar=False) if self.n_kept > 1 else None
        if corr is not None:
            out['correlation'] = np.atleast_2d(np.nan_to_num(corr)).tolist()
        if self.n_kept >= MIN_RHAT_DRAWS:
            rhat, flat = gelman_rubin(self)
            out['rhat'] = rhat.tolist()
            out['zero_variance'] = flat.tolist()
            out['converged'] = bool(np.all(rhat < RHAT_THRESHOLD) and self.divergences == 0)
        if truth is not None:
            truth = np.asarray(truth, dtype=np.float64)
            out['truth'] = truth.tolist()
            out['truth_within_2sigma'] = (np.abs(truth - mean) <= 2.0 * std).tolist()
        return out

    def write_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open('w', newline='') as fh:
            writer = csv.writer(fh)
            writer.writerow(self.names)
            for row in self.draws:
                writer.writerow([repr(float(v)) for v in row])

    def write_summary(self, path: Union[str, Path], truth: Optional[np.ndarray] = None) -> None:
        Path(path).write_text(json.dumps(self.summary(truth), indent=2, sort_keys=True))


def read_chain_csv(path: Union[str, Path]) -> tuple[tuple[str, ...], np.ndarray]:
    with Path(path).open(newline='') as fh:
        rows = list(csv.reader(fh))
    return tuple(rows[0]), np.array([[float(v) for v in row] for row in rows[1:]])


def nuts_sample(
    log_density: LogDensity,
    start: np.ndarray,
    cfg: NutsConfig = NutsConfig(),
    seed: int = 0,
    transform: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    names: Optional[Sequence[str]] = None,
) -> PosteriorChain:
    """
    Single NUTS chain over an unconstrained space.

    `transform` maps kept unconstrained draws to the reported parameters; the first `burn_in`
    iterations adapt the step size (unless disabled) and are discarded.
    """
    q = np.asarray(start, dtype=np.float64).copy()
    logp, grad = log_density(q)
    if not np.isfinite(logp):
        raise ConfigurationError('Log density is not finite at the starting point')
    current = _Point(q, np.zeros_like(q), float(logp), np.asarray(grad, dtype=np.float64))
    rng = make_rng(seed, _STREAM_NUTS)
    eps = cfg.step_size
    adapt = DualAveraging(mu=math.log(10.0 * cfg.step_size), log_eps=math.log(cfg.step_size))
    kept, depths = [], []
    divergences = burn_divergences = 0
    accept_kept = 0.0
    for it in range(cfg.iters):
        tr = nuts_transition(log_density, current, eps, cfg, rng)
        current = tr.point
        if it < cfg.burn_in:
            burn_divergences += tr.divergent
            if cfg.adapt_step:
                eps = adapt.update(tr.accept_stat, cfg.target_accept)
                if it == cfg.burn_in - 1:
                    eps = adapt.final()
                    logger.info('Adapted leapfrog step: %.4g', eps)
        else:
            divergences += tr.divergent
            accept_kept += tr.accept_stat
            kept.append(current.q.copy())
            depths.append(tr.depth)
        if it % 50 == 0:
            logger.debug(
                'NUTS iter %d: logp %.4f depth %d eps %.3g', it, current.logp, tr.depth, eps
            )
    draws = np.array(kept)
    if transform is not None:
        draws = np.array([transform(u) for u in draws])
    names = tuple(names) if names is not None else tuple(f'x{i}' for i in range(q.size))
    chain = PosteriorChain(
        names=names,
        draws=draws.reshape(len(kept), -1),
        burn_in=cfg.burn_in,
        n_total=cfg.iters,
        divergences=divergences,
        burn_in_divergences=burn_divergences,
        step_size=eps,
        accept_rate=accept_kept / max(len(kept), 1),
        max_divergent_fraction=cfg.max_divergent_fraction,
        tree_depths=np.array(depths, dtype=int),
    )
    if chain.invalid:
        logger.warning(
            'Chain invalid: %d of %d kept transitions diverged', divergences, chain.n_kept
        )
    return chain


def gelman_rubin(chain: Union[PosteriorChain, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """
    Split-R̂ of a single chain: the two halves are compared as two chains. Returns R̂ per
    parameter and a flag for parameters whose halves have zero variance (R̂ reported as 1).
    """
    draws = chain.draws if isinstance(chain, PosteriorChain) else np.asarray(chain, dtype=float)
    draws = draws.reshape(draws.shape[0], -1)
    if draws.shape[0] < MIN_RHAT_DRAWS:
        raise ConfigurationError(
            f'Split-R̂ needs at least {MIN_RHAT_DRAWS} draws, got {draws.shape[0]}'
        )
    n = draws.shape[0] // 2
    halves = np.stack([draws[:n], draws[-n:]])
    means = halves.mean(axis=1)
    within = halves.var(axis=1, ddof=1).mean(axis=0)
    between = n * means.var(axis=0, ddof=1)
    flat = within <= 0
    var_plus = (n - 1) / n * within + between / n
    with np.errstate(divide='ignore', invalid='ignore'):
        rhat = np.sqrt(var_plus / np.where(flat, 1.0, within))
    rhat = np.where(flat, np.where(between > 0, np.inf, 1.0), rhat)
    return rhat, flat
