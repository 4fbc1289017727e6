"""
Parameter estimation against observed pressure/volume traces.

The surrogate is integrated on its own Euler grid; observed traces are interpolated onto that
grid. Gradients are the exact discrete adjoint of the misfit (`lnode.rollout_vjp`), so MAP
estimation and the Hamiltonian sampler share one forward/backward pass per evaluation.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import qmc

from heart_surrogate.dataset import TrainingSample
from heart_surrogate.errors import (
    CalibrationError,
    ConfigurationError,
    DatasetError,
    DivergenceError,
)
from heart_surrogate.lnode import (
    N_PHYSICAL,
    PHYSICAL_LABELS,
    CycleContext,
    LnodeModel,
    Rollout,
    Trajectory,
    read_trajectory_csv,
    rollout,
    rollout_vjp,
    write_trajectory_csv,
)
from heart_surrogate.optim import Adam, lbfgs
from heart_surrogate.parallel import SERIAL, WorkerPool
from heart_surrogate.parameters import ParameterSpace
from heart_surrogate.sampling import NutsConfig, PosteriorChain, nuts_sample
from heart_surrogate.utils import derive_seed

logger = logging.getLogger(__name__)

PROBLEM_FORMAT_VERSION = 1
PRIOR_HALF_WIDTH = 0.1
GP_MAX_POINTS = 200
_STREAM_MAP_STARTS = 51
_TANH_LIMIT = 1.0 - 1e-9

# Parameters that move the cycle timing are never calibrated against a single observed beat.
TIMING_PARAMETERS = ('AV_delay', 'T_HB')

TEST_CASES: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    'T_LV': (('V_LV',), ('Emax_LV', 'Emin_LV', 'R_sys', 'R_pulm')),
    'T_ventricles': (('V_LV', 'V_RV'), ('Emax_LV', 'Emin_LV', 'Emax_RV', 'R_sys', 'R_pulm')),
    'T_atria': (('V_LA', 'V_RA'), ('Emax_LA', 'Emax_RA', 'R_sys', 'R_pulm')),
    # empty free tuple: every parameter of the space
    'T_all': (PHYSICAL_LABELS, ()),
}


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    """
    Observed beat plus the parameters to recover.

    `weights` maps physical trace labels to 0/1 flags. Parameters of the model that are not in
    `free_space` take their value from `fixed`.
    """

    free_space: ParameterSpace
    observations: Trajectory
    weights: Mapping[str, int]
    fixed: Mapping[str, float] = field(default_factory=dict)
    z0: Optional[np.ndarray] = None
    truth: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        unknown = [label for label in self.weights if label not in PHYSICAL_LABELS]
        if unknown:
            raise ConfigurationError(f'Unknown trace labels in weights: {unknown}')
        if any(w not in (0, 1) for w in self.weights.values()):
            raise ConfigurationError(f'Trace weights must be 0 or 1, got {dict(self.weights)}')
        if not any(self.weights.values()):
            raise ConfigurationError('At least one observed trace must have weight 1')
        missing = [label for label in self.observed if label not in self.observations.labels]
        if missing:
            raise ConfigurationError(f'Observations lack weighted traces {missing}')
        overlap = set(self.fixed) & set(self.free_space.names)
        if overlap:
            raise ConfigurationError(f'Parameters {sorted(overlap)} are both free and fixed')
        z0 = self.observations.physical[0] if self.z0 is None else self.z0
        z0 = np.asarray(z0, dtype=np.float64).reshape(-1)
        if z0.size != N_PHYSICAL:
            raise ConfigurationError(f'Initial state needs {N_PHYSICAL} values, got {z0.size}')
        object.__setattr__(self, 'z0', z0)
        if self.truth is not None:
            object.__setattr__(self, 'truth', self.free_space.check(self.truth))
        for label in self.observed:
            if self.normalizers()[label] <= 0:
                raise ConfigurationError(f'Observed trace {label} is identically zero')

    @property
    def observed(self) -> tuple[str, ...]:
        return tuple(label for label in PHYSICAL_LABELS if self.weights.get(label, 0))

    @property
    def t_hb(self) -> float:
        return float(self.observations.times[-1])

    @property
    def av_delay(self) -> float:
        return self.observations.context.av_delay

    def normalizers(self, times: Optional[np.ndarray] = None) -> dict[str, float]:
        """Time average of each squared observed trace (left rectangle rule)."""
        times = self.observations.times if times is None else times
        h = np.diff(times)
        out = {}
        for label in self.observed:
            y = self.target(label, times)
            out[label] = float(np.sum(h * y[:-1] ** 2) / times[-1])
        return out

    def target(self, label: str, times: np.ndarray) -> np.ndarray:
        return np.interp(times, self.observations.times, self.observations.trace(label))

    def full_theta(self, theta_free: np.ndarray, space: ParameterSpace) -> np.ndarray:
        theta_free = self.free_space.check(theta_free)
        values = dict(self.fixed)
        values.update(zip(self.free_space.names, theta_free))
        missing = [n for n in space.names if n not in values]
        if missing:
            raise ConfigurationError(f'Parameters {missing} are neither free nor fixed')
        return np.array([values[n] for n in space.names], dtype=np.float64)

    def free_indices(self, space: ParameterSpace) -> np.ndarray:
        return np.array([space.index(n) for n in self.free_space.names], dtype=int)


@dataclass(frozen=True, eq=False)
class _Misfit:
    ctx: CycleContext
    columns: np.ndarray
    targets: np.ndarray
    steps: np.ndarray
    factors: np.ndarray


def _misfit(prob: CalibrationProblem, model: LnodeModel) -> _Misfit:
    if abs(prob.t_hb - model.t_hb) > 1e-6 * model.t_hb:
        raise ConfigurationError(
            f'Observed beat lasts {prob.t_hb} s but the model was trained on {model.t_hb} s'
        )
    ctx = model.cycle(prob.av_delay)
    times = ctx.times
    mu = prob.normalizers(times)
    columns = np.array([PHYSICAL_LABELS.index(label) for label in prob.observed])
    targets = np.column_stack([prob.target(label, times) for label in prob.observed])
    factors = np.array([1.0 / mu[label] for label in prob.observed])
    return _Misfit(ctx, columns, targets, np.diff(times), factors)


def _forward(
    theta: np.ndarray, prob: CalibrationProblem, model: LnodeModel, ctx: CycleContext, grad: bool
) -> tuple[np.ndarray, Rollout]:
    space = model.parameter_space
    theta_full = prob.full_theta(theta, space)
    zhat0 = model.normalize_state(np.concatenate([prob.z0, model.latent_ic]))
    roll = rollout(
        model,
        zhat0[None],
        space.normalize(theta_full)[None],
        np.array([ctx.av_delay]),
        ctx,
        keep_memory=grad,
    )
    return model.denormalize_state(roll.states[0]), roll


def _free_gradient(
    prob: CalibrationProblem, model: LnodeModel, roll: Rollout, cot_physical: np.ndarray
) -> np.ndarray:
    """Pull a cotangent on physical states back to the free parameters."""
    cot = np.zeros_like(roll.states)
    cot[0] = cot_physical * model.state_scale
    _, _, grad_norm = rollout_vjp(model, roll, cot)
    space = model.parameter_space
    grad_full = grad_norm[0] * 2.0 / space.width
    return grad_full[prob.free_indices(space)]


def cost_and_gradient(
    theta: np.ndarray, prob: CalibrationProblem, model: LnodeModel, with_grad: bool = True
) -> tuple[float, Optional[np.ndarray]]:
    fit = _misfit(prob, model)
    states, roll = _forward(theta, prob, model, fit.ctx, with_grad)
    residual = states[:, fit.columns] - fit.targets
    weighted = fit.steps[:, None] * residual[:-1]
    value = float(np.sum(weighted * residual[:-1] * fit.factors))
    if not with_grad:
        return value, None
    cot = np.zeros((len(fit.ctx.times), model.n_states))
    cot[:-1, fit.columns] = 2.0 * weighted * fit.factors
    return value, _free_gradient(prob, model, roll, cot)


def cost(theta: np.ndarray, prob: CalibrationProblem, model: LnodeModel) -> float:
    """Normalized L² misfit of the weighted traces; +inf when the surrogate diverges."""
    try:
        value, _ = cost_and_gradient(theta, prob, model, with_grad=False)
    except DivergenceError as exc:
        logger.debug('Cost evaluation diverged: %s', exc)
        return math.inf
    return value


def adjoint_gradient(theta: np.ndarray, prob: CalibrationProblem, model: LnodeModel) -> np.ndarray:
    _, grad = cost_and_gradient(theta, prob, model)
    assert grad is not None
    return grad


def to_unconstrained(theta: np.ndarray, space: ParameterSpace) -> np.ndarray:
    s = np.clip(space.normalize(theta), -_TANH_LIMIT, _TANH_LIMIT)
    return np.arctanh(s)


def from_unconstrained(u: np.ndarray, space: ParameterSpace) -> np.ndarray:
    return space.lower + space.width * 0.5 * (1.0 + np.tanh(u))


@dataclass
class MapStart:
    index: int
    theta_init: np.ndarray
    theta: Optional[np.ndarray]
    cost: float
    n_iter: int
    message: str

    @property
    def ok(self) -> bool:
        return self.theta is not None and math.isfinite(self.cost)

    def log_line(self) -> str:
        return f'start {self.index}: cost={self.cost:.6g} iters={self.n_iter} ({self.message})'


@dataclass
class MapResult:
    names: tuple[str, ...]
    theta: np.ndarray
    cost: float
    initial_cost: float
    starts: list[MapStart]

    def to_json(self) -> dict[str, Any]:
        return {
            'theta': dict(zip(self.names, self.theta.tolist())),
            'cost': self.cost,
            'initial_cost': self.initial_cost,
            'starts': [start.log_line() for start in self.starts],
        }

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def _map_start(
    indexed: tuple[int, np.ndarray],
    prob: CalibrationProblem,
    model: LnodeModel,
    max_iter: int,
) -> MapStart:
    index, theta0 = indexed
    space = prob.free_space
    half_width = 0.5 * space.width

    def objective(u: np.ndarray) -> tuple[float, np.ndarray]:
        theta = from_unconstrained(u, space)
        value, grad = cost_and_gradient(theta, prob, model)
        assert grad is not None
        return value, grad * half_width * (1.0 - np.tanh(u) ** 2)

    try:
        res = lbfgs(objective, to_unconstrained(theta0, space), max_iter, label=f'map[{index}]')
    except DivergenceError as exc:
        return MapStart(index, theta0, None, math.inf, 0, f'diverged: {exc}')
    theta = from_unconstrained(res.x, space)
    return MapStart(index, theta0, theta, res.fun, res.n_iter, res.message)


def start_points(
    space: ParameterSpace, theta_init: np.ndarray, n_starts: int, seed: int
) -> list[np.ndarray]:
    """`theta_init` followed by scrambled Sobol' points of the free box."""
    points = [space.check(theta_init)]
    if n_starts > 1:
        sampler = qmc.Sobol(d=space.dim, scramble=True, seed=derive_seed(seed, _STREAM_MAP_STARTS))
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', UserWarning)
            points.extend(space.from_unit(sampler.random(n_starts - 1)))
    return points


def map_estimate(
    prob: CalibrationProblem,
    theta_init: np.ndarray,
    model: LnodeModel,
    n_starts: int = 4,
    max_iter: int = 500,
    seed: int = 0,
    pool: WorkerPool = SERIAL,
) -> MapResult:
    """
    Multi-start L-BFGS on the tanh reparameterization of the free box. The returned cost never
    exceeds the cost at `theta_init`.
    """
    theta_init = prob.free_space.check(theta_init)
    if not prob.free_space.contains(theta_init):
        raise ConfigurationError(f'Initial guess {theta_init} lies outside the parameter bounds')
    initial_cost = cost(theta_init, prob, model)
    points = start_points(prob.free_space, theta_init, n_starts, seed)
    starts = pool.map(
        partial(_map_start, prob=prob, model=model, max_iter=max_iter), list(enumerate(points))
    )
    for start in starts:
        logger.info('MAP %s', start.log_line())
    finished = [s for s in starts if s.ok]
    if not finished:
        raise CalibrationError('Every MAP start diverged', [s.log_line() for s in starts])
    best = min(finished, key=lambda s: s.cost)
    assert best.theta is not None
    theta, value = best.theta, best.cost
    if initial_cost <= value:
        theta, value = theta_init, initial_cost
    logger.info('MAP cost %.6g (initial %.6g)', value, initial_cost)
    return MapResult(prob.free_space.names, theta, value, initial_cost, starts)


@dataclass(frozen=True)
class GpErrorModel:
    """
    Squared-exponential surrogate-error covariance per trace: σ_i² exp(-Δt² / (2 λ²)), with λ in
    seconds shared by every trace.
    """

    sigma: Mapping[str, float]
    length_scale: float
    unit: str = 's'

    def __post_init__(self) -> None:
        if self.length_scale <= 0:
            raise ConfigurationError(f'GP length scale must be positive, got {self.length_scale}')
        if any(s < 0 for s in self.sigma.values()):
            raise ConfigurationError(f'GP amplitudes must be non-negative, got {self.sigma}')

    def correlation(self, times: np.ndarray) -> np.ndarray:
        lag = np.subtract.outer(times, times)
        return np.exp(-0.5 * (lag / self.length_scale) ** 2)

    def covariance(self, label: str, times: np.ndarray) -> np.ndarray:
        return self.sigma[label] ** 2 * self.correlation(times)

    def to_json(self) -> dict[str, Any]:
        return {'sigma': dict(self.sigma), 'length_scale': self.length_scale, 'unit': self.unit}

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> GpErrorModel:
        return cls(
            {k: float(v) for k, v in data['sigma'].items()},
            float(data['length_scale']),
            str(data.get('unit', 's')),
        )


def cholesky(matrix: np.ndarray, scale: float = 1.0) -> tuple[np.ndarray, bool]:
    """Cholesky factor with jitter escalating from 0 to 1e-8·scale on the diagonal."""
    eye = np.eye(matrix.shape[0])
    for jitter in (0.0, 1e-12, 1e-10, 1e-8):
        try:
            return cho_factor(matrix + jitter * scale * eye, lower=True)
        except LinAlgError:
            logger.debug('Cholesky failed with jitter %.0e', jitter)
    raise ConfigurationError('Covariance is not positive definite after jitter escalation')


def subsample_stride(n_points: int, max_points: int = GP_MAX_POINTS) -> int:
    return max(1, math.ceil(n_points / max_points))


def _length_scale_gradient(
    length: float, times: np.ndarray, standardized: np.ndarray
) -> tuple[float, float]:
    """Log-likelihood of unit-variance traces (rows) and its derivative in log λ."""
    corr = GpErrorModel({}, length).correlation(times)
    factor = cholesky(corr)
    alpha = cho_solve(factor, standardized.T)
    m = standardized.shape[0]
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    loglik = -0.5 * float(np.sum(standardized.T * alpha)) - 0.5 * m * logdet
    d_corr = corr * np.subtract.outer(times, times) ** 2 / length**3
    inner = alpha @ alpha.T - m * cho_solve(factor, np.eye(len(times)))
    return loglik, 0.5 * float(np.sum(inner * d_corr)) * length


def fit_gp_error(
    residuals: Mapping[str, np.ndarray],
    times: np.ndarray,
    n_iter: int = 1000,
    lr: float = 0.05,
    initial_length: float = 0.02,
    max_points: int = GP_MAX_POINTS,
) -> GpErrorModel:
    """
    Amplitudes are the pooled RMS of each trace's residuals (floored at 1e-6); the shared length
    scale maximizes the summed Gaussian log-likelihood of all residual traces.

    `residuals[label]` is (n_traces, len(times)).
    """
    if not residuals:
        raise ConfigurationError('Need residual traces for at least one signal')
    times = np.asarray(times, dtype=np.float64)
    sigma = {}
    rows = []
    stride = subsample_stride(len(times), max_points)
    for label, res in residuals.items():
        res = np.atleast_2d(np.asarray(res, dtype=np.float64))
        if res.shape[1] != len(times):
            raise DatasetError(
                f'Residuals for {label} have {res.shape[1]} points, not {len(times)}'
            )
        sigma[label] = max(float(np.sqrt(np.mean(res**2))), 1e-6)
        rows.append(res[:, ::stride] / sigma[label])
    grid = times[::stride]
    standardized = np.concatenate(rows)
    lo, hi = math.log(1e-6), math.log(max(float(times[-1] - times[0]), 1e-6))
    log_length = np.array([math.log(initial_length)])
    adam = Adam(lr=lr)
    for it in range(n_iter):
        loglik, grad = _length_scale_gradient(math.exp(log_length[0]), grid, standardized)
        log_length = np.clip(adam.step(log_length, -np.array([grad])), lo, hi)
        if it % 100 == 0:
            logger.debug(
                'GP fit iter %d: loglik %.6g, lambda %.4g', it, loglik, math.exp(log_length[0])
            )
    gp = GpErrorModel(sigma, float(math.exp(log_length[0])))
    logger.info('GP error model: lambda=%.4g s, sigma=%s', gp.length_scale, gp.sigma)
    return gp


def residual_traces(
    predictions: Sequence[Trajectory], targets: Sequence[TrainingSample], labels: Sequence[str]
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Model-minus-truth residuals on the targets' shared grid."""
    if not targets:
        raise DatasetError('Need at least one test sample for residuals')
    times = targets[0].times
    out: dict[str, list[np.ndarray]] = {label: [] for label in labels}
    for pred, sample in zip(predictions, targets):
        if len(sample.times) != len(times) or not np.allclose(sample.times, times):
            raise DatasetError(f'Sample {sample.sample_id} is on a different time grid')
        for label in labels:
            col = PHYSICAL_LABELS.index(label)
            out[label].append(pred.trace(label) - sample.states[:, col])
    return {label: np.array(rows) for label, rows in out.items()}, times


def prior_box(
    theta_map: np.ndarray, space: ParameterSpace, chi: float = PRIOR_HALF_WIDTH
) -> ParameterSpace:
    """Uniform prior support θ ± χ|θ| clipped to the bounds (χ·range when θ is 0)."""
    theta_map = space.check(theta_map)
    half = chi * np.abs(theta_map)
    half = np.where(half > 0, half, chi * space.width)
    return space.with_bounds(
        np.maximum(space.lower, theta_map - half), np.minimum(space.upper, theta_map + half)
    )


class Likelihood:
    """
    Multivariate-normal log density of the observed traces around the surrogate prediction,
    evaluated on the model grid subsampled to at most `max_points` times.
    """

    def __init__(
        self,
        prob: CalibrationProblem,
        gp: GpErrorModel,
        model: LnodeModel,
        max_points: int = GP_MAX_POINTS,
    ):
        missing = [label for label in prob.observed if label not in gp.sigma]
        if missing:
            raise ConfigurationError(f'GP error model has no amplitude for {missing}')
        self.prob = prob
        self.model = model
        self.ctx = model.cycle(prob.av_delay)
        times = self.ctx.times
        self.stride = subsample_stride(len(times), max_points)
        self.indices = np.arange(0, len(times), self.stride)
        grid = times[self.indices]
        self.columns = np.array([PHYSICAL_LABELS.index(label) for label in prob.observed])
        self.targets = np.column_stack([prob.target(label, grid) for label in prob.observed])
        corr = gp.correlation(grid)
        self.factor = cholesky(corr)
        self.variances = np.array([max(gp.sigma[label], 1e-6) ** 2 for label in prob.observed])
        logdet_corr = 2.0 * np.sum(np.log(np.diag(self.factor[0])))
        n = len(grid)
        self.normalization = -0.5 * float(
            np.sum(n * np.log(2.0 * np.pi * self.variances) + logdet_corr)
        )
        logger.debug('Likelihood grid: %d points (stride %d)', n, self.stride)

    def value_and_grad(
        self, theta: np.ndarray, with_grad: bool = True
    ) -> tuple[float, Optional[np.ndarray]]:
        states, roll = _forward(theta, self.prob, self.model, self.ctx, with_grad)
        residual = states[np.ix_(self.indices, self.columns)] - self.targets
        weighted = cho_solve(self.factor, residual) / self.variances
        value = self.normalization - 0.5 * float(np.sum(residual * weighted))
        if not with_grad:
            return value, None
        cot = np.zeros((len(self.ctx.times), self.model.n_states))
        cot[np.ix_(self.indices, self.columns)] = -weighted
        return value, _free_gradient(self.prob, self.model, roll, cot)


def log_likelihood(
    theta: np.ndarray, prob: CalibrationProblem, gp: GpErrorModel, model: LnodeModel
) -> float:
    value, _ = Likelihood(prob, gp, model).value_and_grad(theta, with_grad=False)
    return value


def log_posterior(
    theta: np.ndarray,
    prob: CalibrationProblem,
    gp: GpErrorModel,
    prior: ParameterSpace,
    model: LnodeModel,
    likelihood: Optional[Likelihood] = None,
) -> float:
    """Log-likelihood plus a flat log prior on `prior`; -inf outside it or on divergence."""
    if not prior.contains(theta):
        return -math.inf
    likelihood = likelihood or Likelihood(prob, gp, model)
    try:
        value, _ = likelihood.value_and_grad(theta, with_grad=False)
    except DivergenceError:
        return -math.inf
    return value


class PosteriorTarget:
    """
    Log posterior over the unconstrained coordinates u with θ = lo + width·(1 + tanh u)/2 on the
    prior box, including the log-Jacobian of that map.
    """

    def __init__(self, likelihood: Likelihood, prior: ParameterSpace):
        self.likelihood = likelihood
        self.prior = prior

    def transform(self, u: np.ndarray) -> np.ndarray:
        return from_unconstrained(u, self.prior)

    def __call__(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        theta = self.transform(u)
        try:
            value, grad = self.likelihood.value_and_grad(theta)
        except DivergenceError:
            return -math.inf, np.zeros_like(u)
        assert grad is not None
        au = np.abs(u)
        # log(1 - tanh²u) without underflow
        log_sech2 = 2.0 * (math.log(2.0) - au - np.log1p(np.exp(-2.0 * au)))
        log_jac = float(np.sum(np.log(0.5 * self.prior.width) + log_sech2))
        dtheta_du = 0.5 * self.prior.width * (1.0 - np.tanh(u) ** 2)
        return value + log_jac, grad * dtheta_du - 2.0 * np.tanh(u)


def run_hmc(
    prob: CalibrationProblem,
    gp: GpErrorModel,
    theta_map: np.ndarray,
    model: LnodeModel,
    cfg: NutsConfig = NutsConfig(),
    seed: int = 0,
    chi: float = PRIOR_HALF_WIDTH,
) -> PosteriorChain:
    prior = prior_box(theta_map, prob.free_space, chi)
    target = PosteriorTarget(Likelihood(prob, gp, model), prior)
    logger.info('Sampling %s on prior box %s', prior.names, prior.to_json())
    return nuts_sample(
        target,
        to_unconstrained(theta_map, prior),
        cfg,
        seed=seed,
        transform=target.transform,
        names=prior.names,
    )


def test_case(
    name: str,
    sample: TrainingSample,
    space: ParameterSpace,
    model: Optional[LnodeModel] = None,
) -> CalibrationProblem:
    """
    Preset observation/free-parameter combination for a sample with known truth; every
    parameter outside the free set is fixed at the sample's value.
    """
    try:
        observed, wanted = TEST_CASES[name]
    except KeyError as exc:
        raise ConfigurationError(
            f'Unknown test case {name!r}; pick one of {list(TEST_CASES)}'
        ) from exc
    if model is not None and model.parameter_space.names != space.names:
        raise ConfigurationError('Model parameters differ from the sample parameter space')
    candidates = wanted or space.names
    free = [n for n in candidates if n in space and n not in TIMING_PARAMETERS]
    if not free:
        raise ConfigurationError(f'Test case {name} has no free parameter in {space.names}')
    theta = space.check(sample.theta)
    free_space = space.subset(free)
    fixed = {n: float(v) for n, v in zip(space.names, theta) if n not in free}
    return CalibrationProblem(
        free_space=free_space,
        observations=sample.trajectory,
        weights={label: int(label in observed) for label in PHYSICAL_LABELS},
        fixed=fixed,
        truth=np.array([theta[space.index(n)] for n in free]),
    )


def write_problem(
    prob: CalibrationProblem, path: Union[str, Path], observations_file: str = 'observations.csv'
) -> Path:
    path = Path(path)
    write_trajectory_csv(prob.observations, path.parent / observations_file)
    data = {
        'format_version': PROBLEM_FORMAT_VERSION,
        'observations': observations_file,
        'av_delay': prob.av_delay,
        't_hb': prob.t_hb,
        'weights': dict(prob.weights),
        'free': prob.free_space.to_json(),
        'fixed': dict(prob.fixed),
        'z0': np.asarray(prob.z0).tolist(),
        'truth': None if prob.truth is None else prob.truth.tolist(),
    }
    path.write_text(json.dumps(data, indent=2, sort_keys=True))
    return path


def load_problem(path: Union[str, Path]) -> CalibrationProblem:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f'Could not read calibration problem {path}: {exc}') from exc
    if data.get('format_version') != PROBLEM_FORMAT_VERSION:
        raise DatasetError(f'Unsupported problem format version {data.get("format_version")!r}')
    try:
        observations = read_trajectory_csv(
            path.parent / data['observations'], float(data.get('av_delay', 0.0))
        )
        free_space = ParameterSpace.from_json(data['free'])
        weights = {str(k): int(v) for k, v in data['weights'].items()}
        fixed = {str(k): float(v) for k, v in data.get('fixed', {}).items()}
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, (ConfigurationError, DatasetError)):
            raise
        raise DatasetError(f'Malformed calibration problem {path}: {exc}') from exc
    t_hb = data.get('t_hb')
    if t_hb is not None and abs(observations.times[-1] - float(t_hb)) > 1e-9 * float(t_hb):
        raise DatasetError(f'Observations in {path} do not span the stated beat {t_hb} s')
    truth = data.get('truth')
    return CalibrationProblem(
        free_space=free_space,
        observations=observations,
        weights=weights,
        fixed=fixed,
        z0=None if data.get('z0') is None else np.array(data['z0'], dtype=np.float64),
        truth=None if truth is None else np.array(truth, dtype=np.float64),
    )
