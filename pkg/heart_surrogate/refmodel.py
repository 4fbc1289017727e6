"""
Synthetic ground truth.

A closed-loop lumped circulation with four time-varying-elastance chambers, smooth diode valves
and two arterio-venous branches, plus closed-form test problems for the sensitivity and
integrator checks. Units are mmHg, mL and seconds throughout.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import partial
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.integrate import simpson
from scipy.stats import qmc

from heart_surrogate.dataset import Dataset, TrainingSample, sample_from_trajectory
from heart_surrogate.errors import ConfigurationError
from heart_surrogate.lnode import (
    N_PHYSICAL,
    PHYSICAL_LABELS,
    CycleContext,
    Trajectory,
    VectorField,
)
from heart_surrogate.parallel import SERIAL, WorkerPool, chunks
from heart_surrogate.parameters import ParameterSpace, ParameterSpec
from heart_surrogate.utils import derive_seed, make_rng

logger = logging.getLogger(__name__)

GENERATOR_VERSION = 'circulation-0d/1'

COMPARTMENTS = ('LA', 'LV', 'RA', 'RV', 'sa', 'sv', 'pa', 'pv')
LA, LV, RA, RV, SA, SV, PA, PV = range(len(COMPARTMENTS))

# Sampled parameter ranges: elastances mmHg/mL, resistances mmHg s/mL, times s.
CIRCULATION_SPECS = (
    ParameterSpec('Emax_LA', 'mmHg/mL', 0.6, 1.1, 'atria'),
    ParameterSpec('Emax_RA', 'mmHg/mL', 0.55, 1.05, 'atria'),
    ParameterSpec('Emax_LV', 'mmHg/mL', 1.4, 2.5, 'ventricles'),
    ParameterSpec('Emin_LV', 'mmHg/mL', 0.04, 0.07, 'ventricles'),
    ParameterSpec('Emax_RV', 'mmHg/mL', 0.24, 0.44, 'ventricles'),
    ParameterSpec('Emin_RV', 'mmHg/mL', 0.015, 0.027, 'ventricles'),
    ParameterSpec('AV_delay', 's', 0.12, 0.2, 'whole-heart'),
    ParameterSpec('T_HB', 's', 0.7, 1.0, 'whole-heart'),
    ParameterSpec('R_sys', 'mmHg s/mL', 0.6, 1.1, 'circulation'),
    ParameterSpec('R_pulm', 'mmHg s/mL', 0.025, 0.05, 'circulation'),
)
BENCHMARK_PARAMETERS = ('Emax_LV', 'Emin_LV', 'Emax_RV', 'R_sys', 'R_pulm')

CIRCULATION_DEFAULTS = {
    'Emax_LA': 0.85,
    'Emin_LA': 0.15,
    'Emax_RA': 0.8,
    'Emin_RA': 0.1,
    'Emax_LV': 2.0,
    'Emin_LV': 0.055,
    'Emax_RV': 0.34,
    'Emin_RV': 0.021,
    'AV_delay': 0.16,
    'T_HB': 0.8,
    'R_sys': 0.85,
    'R_pulm': 0.035,
}

# Unstressed volumes (mL) and vessel compliances (mL/mmHg), COMPARTMENTS order.
REST_VOLUMES = np.array([4.0, 5.0, 4.0, 10.0, 600.0, 2800.0, 100.0, 400.0])
VESSEL_COMPLIANCE = {SA: 1.5, SV: 50.0, PA: 4.0, PV: 20.0}
INITIAL_VOLUMES = np.array([60.0, 120.0, 60.0, 120.0, 720.0, 3050.0, 160.0, 560.0])
R_VALVE_OPEN = 0.003
G_VALVE_CLOSED = 1e-5
VALVE_BAND = 0.1
R_SYSTEMIC_VEIN = 0.02
R_PULMONARY_VEIN = 0.01

# Activation shape as fractions of the period: (contraction, relaxation)
ATRIAL_TWITCH = (0.12, 0.12)
VENTRICULAR_TWITCH = (0.35, 0.2)

_STREAM_DESIGN = 11
_STREAM_SPLIT = 12
_SIM_CHUNK = 16


def circulation_space(
    names: Optional[Sequence[str]] = None, include_t_hb: bool = False
) -> ParameterSpace:
    """
    The generator's parameter space. Without `names` every parameter is included except
    `T_HB`, which the surrogate needs shared across a dataset unless asked otherwise.
    """
    full = ParameterSpace(CIRCULATION_SPECS)
    if names is None:
        names = [n for n in full.names if include_t_hb or n != 'T_HB']
    return full.subset(names)


def benchmark_space() -> ParameterSpace:
    return circulation_space(BENCHMARK_PARAMETERS)


@dataclass(frozen=True)
class CirculationSettings:
    t_hb: float = CIRCULATION_DEFAULTS['T_HB']
    av_delay: float = CIRCULATION_DEFAULTS['AV_delay']
    n_beats: int = 5
    dt_integration: float = 1e-4
    dt_output: float = 1e-3
    fixed: Mapping[str, float] = field(default_factory=lambda: dict(CIRCULATION_DEFAULTS))

    def __post_init__(self) -> None:
        if self.n_beats < 2:
            raise ConfigurationError(f'At least 2 beats are needed, got {self.n_beats}')
        if not 0 < self.dt_integration <= self.dt_output:
            raise ConfigurationError(
                f'Need 0 < dt_integration <= dt_output, got {self.dt_integration}, {self.dt_output}'
            )
        unknown = set(self.fixed) - set(CIRCULATION_DEFAULTS)
        if unknown:
            raise ConfigurationError(f'Unknown circulation parameters {sorted(unknown)}')


@dataclass(frozen=True, eq=False)
class CirculationRun:
    trajectory: Trajectory
    arterial_pressure: np.ndarray
    pulmonary_pressure: np.ndarray
    total_volume: np.ndarray
    stroke_volumes: np.ndarray
    warnings: tuple[str, ...] = ()


def activation(
    t: np.ndarray, onset: np.ndarray, t_hb: np.ndarray, twitch: tuple[float, float]
) -> np.ndarray:
    contraction, relaxation = twitch[0] * t_hb, twitch[1] * t_hb
    tau = np.mod(t - onset, t_hb)
    rising = 0.5 * (1.0 - np.cos(np.pi * tau / contraction))
    falling = 0.5 * (1.0 + np.cos(np.pi * (tau - contraction) / relaxation))
    falling = np.where(tau < contraction + relaxation, falling, 0.0)
    return np.where(tau < contraction, rising, falling)


def _valve_flow(dp: np.ndarray) -> np.ndarray:
    g_open = 1.0 / R_VALVE_OPEN
    opening = 0.5 * (1.0 + np.tanh(dp / VALVE_BAND))
    return (G_VALVE_CLOSED + (g_open - G_VALVE_CLOSED) * opening) * dp


def _pressures(
    volumes: np.ndarray, t: np.ndarray, prm: Mapping[str, np.ndarray]
) -> np.ndarray:
    act_a = activation(t, 0.0, prm['T_HB'], ATRIAL_TWITCH)
    act_v = activation(t, prm['AV_delay'], prm['T_HB'], VENTRICULAR_TWITCH)
    stressed = volumes - REST_VOLUMES
    p = np.empty_like(volumes)
    for chamber, act in ((LA, act_a), (RA, act_a), (LV, act_v), (RV, act_v)):
        name = COMPARTMENTS[chamber]
        elastance = prm[f'Emin_{name}'] + (prm[f'Emax_{name}'] - prm[f'Emin_{name}']) * act
        p[..., chamber] = elastance * stressed[..., chamber]
    for vessel, compliance in VESSEL_COMPLIANCE.items():
        p[..., vessel] = stressed[..., vessel] / compliance
    return p


def _volume_rates(
    volumes: np.ndarray, t: np.ndarray, prm: Mapping[str, np.ndarray]
) -> np.ndarray:
    p = _pressures(volumes, t, prm)
    q_mitral = _valve_flow(p[:, LA] - p[:, LV])
    q_aortic = _valve_flow(p[:, LV] - p[:, SA])
    q_systemic = (p[:, SA] - p[:, SV]) / prm['R_sys']
    q_caval = (p[:, SV] - p[:, RA]) / R_SYSTEMIC_VEIN
    q_tricuspid = _valve_flow(p[:, RA] - p[:, RV])
    q_pulmonic = _valve_flow(p[:, RV] - p[:, PA])
    q_pulmonary = (p[:, PA] - p[:, PV]) / prm['R_pulm']
    q_pulm_vein = (p[:, PV] - p[:, LA]) / R_PULMONARY_VEIN
    # every flow leaves one compartment and enters another, so the rates sum to zero
    return np.stack(
        [
            q_pulm_vein - q_mitral,
            q_mitral - q_aortic,
            q_caval - q_tricuspid,
            q_tricuspid - q_pulmonic,
            q_aortic - q_systemic,
            q_systemic - q_caval,
            q_pulmonic - q_pulmonary,
            q_pulmonary - q_pulm_vein,
        ],
        axis=-1,
    )


def _batch_parameters(
    thetas: np.ndarray, space: ParameterSpace, settings: CirculationSettings
) -> dict[str, np.ndarray]:
    unknown = [n for n in space.names if n not in CIRCULATION_DEFAULTS]
    if unknown:
        raise ConfigurationError(f'Circulation model has no parameters {unknown}')
    thetas = np.atleast_2d(space.check(thetas))
    base = {
        **CIRCULATION_DEFAULTS,
        **settings.fixed,
        'T_HB': settings.t_hb,
        'AV_delay': settings.av_delay,
    }
    prm = {name: np.full(thetas.shape[0], float(value)) for name, value in base.items()}
    for idx, name in enumerate(space.names):
        prm[name] = thetas[:, idx].copy()
    return prm


def simulate_batch(
    thetas: np.ndarray,
    space: ParameterSpace,
    settings: CirculationSettings = CirculationSettings(),
) -> list[CirculationRun]:
    """
    RK4 over `settings.n_beats` beats for a batch of parameter points at once.

    Every sample takes the same number of steps per beat, so its own step is T_HB / n with
    n = ceil(max T_HB / dt_integration).
    """
    prm = _batch_parameters(thetas, space, settings)
    t_hb = prm['T_HB']
    n_batch = t_hb.size
    n_steps = int(np.ceil(t_hb.max() / settings.dt_integration - 1e-9))
    h = t_hb / n_steps
    volumes = np.tile(INITIAL_VOLUMES, (n_batch, 1))
    last_beat = np.empty((n_steps + 1, n_batch, len(COMPARTMENTS)))
    stroke = np.empty((settings.n_beats, n_batch))
    hh = h[:, None]
    for beat in range(settings.n_beats):
        v_lv_max = volumes[:, LV].copy()
        v_lv_min = volumes[:, LV].copy()
        keep = beat == settings.n_beats - 1
        if keep:
            last_beat[0] = volumes
        for k in range(n_steps):
            t = (beat * n_steps + k) * h
            k1 = _volume_rates(volumes, t, prm)
            k2 = _volume_rates(volumes + 0.5 * hh * k1, t + 0.5 * h, prm)
            k3 = _volume_rates(volumes + 0.5 * hh * k2, t + 0.5 * h, prm)
            k4 = _volume_rates(volumes + hh * k3, t + h, prm)
            volumes = volumes + hh / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            np.maximum(v_lv_max, volumes[:, LV], out=v_lv_max)
            np.minimum(v_lv_min, volumes[:, LV], out=v_lv_min)
            if keep:
                last_beat[k + 1] = volumes
        stroke[beat] = v_lv_max - v_lv_min
    if not np.isfinite(last_beat).all():
        raise ConfigurationError('Circulation model produced non-finite volumes')

    local = np.arange(n_steps + 1)[:, None] * h[None, :]
    pressures = _pressures(last_beat, local, prm)
    return [
        _assemble_run(b, local[:, b], last_beat[:, b], pressures[:, b], stroke[:, b], prm, settings)
        for b in range(n_batch)
    ]


def _assemble_run(
    b: int,
    local_times: np.ndarray,
    volumes: np.ndarray,
    pressures: np.ndarray,
    stroke: np.ndarray,
    prm: Mapping[str, np.ndarray],
    settings: CirculationSettings,
) -> CirculationRun:
    ctx = CycleContext(float(prm['T_HB'][b]), float(prm['AV_delay'][b]), settings.dt_output)
    fine = np.column_stack([pressures[:, :4], volumes[:, :4]])
    states = np.column_stack(
        [np.interp(ctx.times, local_times, fine[:, i]) for i in range(N_PHYSICAL)]
    )

    messages = []
    drift = abs(stroke[-1] - stroke[-2]) / max(stroke[-2], 1e-12)
    if drift > 0.1:
        messages.append(f'stroke volume drift {drift:.1%} between the last two beats')
    span = np.maximum(np.abs(fine).max(axis=0), 1e-12)
    gap = np.abs(fine[-1] - fine[0]) / span
    if np.any(gap > 0.02):
        worst = int(np.argmax(gap))
        messages.append(f'{PHYSICAL_LABELS[worst]} not periodic within 2% ({gap[worst]:.1%})')
    if np.any(states[:, :4] <= 0) or np.any(states[:, 4:] <= 0):
        messages.append('non-positive chamber pressure or volume')

    return CirculationRun(
        trajectory=Trajectory(ctx, ctx.times, states, PHYSICAL_LABELS),
        arterial_pressure=np.interp(ctx.times, local_times, pressures[:, SA]),
        pulmonary_pressure=np.interp(ctx.times, local_times, pressures[:, PA]),
        total_volume=volumes.sum(axis=1),
        stroke_volumes=stroke.copy(),
        warnings=tuple(messages),
    )


def simulate_circulation(
    theta: np.ndarray,
    space: ParameterSpace,
    ctx: Optional[CycleContext] = None,
    n_beats: Optional[int] = None,
    settings: Optional[CirculationSettings] = None,
) -> CirculationRun:
    """
    Simulate `n_beats` beats and return the last one on the `ctx` grid.

    `ctx` supplies the period, delay and output step unless `theta` carries them itself.
    """
    settings = settings or CirculationSettings()
    overrides: dict[str, object] = {}
    if ctx is not None:
        overrides.update(t_hb=ctx.t_hb, av_delay=ctx.av_delay, dt_output=ctx.dt)
    if n_beats is not None:
        overrides['n_beats'] = n_beats
    if overrides:
        settings = CirculationSettings(**{**_settings_dict(settings), **overrides})
    run = simulate_batch(np.asarray(theta, dtype=np.float64)[None], space, settings)[0]
    for message in run.warnings:
        logger.warning('Circulation model: %s', message)
    return run


def _settings_dict(settings: CirculationSettings) -> dict[str, object]:
    return {
        't_hb': settings.t_hb,
        'av_delay': settings.av_delay,
        'n_beats': settings.n_beats,
        'dt_integration': settings.dt_integration,
        'dt_output': settings.dt_output,
        'fixed': dict(settings.fixed),
    }


def design_points(
    space: ParameterSpace, n_samples: int, seed: int, stream: int = _STREAM_DESIGN
) -> np.ndarray:
    """Scrambled Sobol' points mapped into `space`."""
    sampler = qmc.Sobol(d=space.dim, scramble=True, seed=derive_seed(seed, stream))
    with warnings.catch_warnings():
        # balance warning for sample counts that are not powers of two
        warnings.simplefilter('ignore', UserWarning)
        unit = sampler.random(n_samples)
    return space.from_unit(unit)


def generate_dataset(
    space: ParameterSpace,
    n_samples: int,
    seed: int,
    settings: CirculationSettings = CirculationSettings(),
    n_test: int = 0,
    pool: WorkerPool = SERIAL,
) -> Dataset:
    if n_samples < 1:
        raise ConfigurationError(f'Need at least one sample, got {n_samples}')
    if not 0 <= n_test <= n_samples:
        raise ConfigurationError(f'Test split {n_test} must lie in [0, {n_samples}]')
    thetas = design_points(space, n_samples, seed)
    test_idx = set(make_rng(seed, _STREAM_SPLIT).choice(n_samples, n_test, replace=False).tolist())
    logger.info('Simulating %d circulation samples (%d beats each)', n_samples, settings.n_beats)
    runs = [
        run
        for batch in pool.map(
            partial(simulate_batch, space=space, settings=settings), chunks(thetas, _SIM_CHUNK)
        )
        for run in batch
    ]
    samples = []
    for idx, (theta, run) in enumerate(zip(thetas, runs)):
        for message in run.warnings:
            logger.warning('sample_%05d: %s', idx, message)
        samples.append(
            sample_from_trajectory(
                f'sample_{idx:05d}',
                theta,
                run.trajectory,
                split='test' if idx in test_idx else 'train',
                warnings=run.warnings,
            )
        )
    provenance = {'generator': GENERATOR_VERSION, **_settings_dict(settings), 'n_test': n_test}
    return Dataset(space, tuple(samples), provenance, seed)


def pv_loop_area(
    p: np.ndarray, v: np.ndarray, method: str = 'trapezoid', dt: float = 1e-3
) -> float:
    """
    Signed loop integral of p dV over one sampled cycle.

    'trapezoid' integrates along the closed polygon in the volume coordinate; 'simpson'
    integrates p(t) dV/dt over time with the volume rate from centered differences.
    """
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if method == 'trapezoid':
        p_closed = np.append(p, p[0])
        v_closed = np.append(v, v[0])
        return float(np.sum(0.5 * (p_closed[1:] + p_closed[:-1]) * np.diff(v_closed)))
    if method == 'simpson':
        return float(simpson(p * np.gradient(v, dt), dx=dt))
    raise ConfigurationError(f'Unknown quadrature {method!r}')


@dataclass(frozen=True)
class AdditiveMap:
    """Y = sum a_i X_i with independent unit-variance uniform inputs."""

    coefficients: tuple[float, ...] = (1.0, 2.0, 3.0)

    @property
    def space(self) -> ParameterSpace:
        half = np.sqrt(3.0)
        return ParameterSpace(
            tuple(ParameterSpec(f'x{i}', '', -half, half) for i in range(len(self.coefficients)))
        )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ np.asarray(self.coefficients)

    def analytic_indices(self) -> tuple[np.ndarray, np.ndarray]:
        a2 = np.asarray(self.coefficients) ** 2
        share = a2 / a2.sum()
        return share, share.copy()


@dataclass(frozen=True)
class IshigamiFunction:
    a: float = 7.0
    b: float = 0.1

    @property
    def space(self) -> ParameterSpace:
        return ParameterSpace(tuple(ParameterSpec(f'x{i}', '', -np.pi, np.pi) for i in range(3)))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        return (
            np.sin(x[..., 0])
            + self.a * np.sin(x[..., 1]) ** 2
            + self.b * x[..., 2] ** 4 * np.sin(x[..., 0])
        )

    def analytic_indices(self) -> tuple[np.ndarray, np.ndarray]:
        a, b, pi = self.a, self.b, np.pi
        v1 = 0.5 * (1.0 + b * pi**4 / 5.0) ** 2
        v2 = a**2 / 8.0
        v13 = 8.0 * b**2 * pi**8 / 225.0
        total = v1 + v2 + v13
        return np.array([v1, v2, 0.0]) / total, np.array([v1 + v13, v2, v13]) / total


def ishigami_analytic() -> tuple[np.ndarray, np.ndarray]:
    return IshigamiFunction().analytic_indices()


def ishigami_oracle(
    n_outer: int = 1000,
    n_inner: int = 1000,
    seed: int = 0,
    fn: IshigamiFunction = IshigamiFunction(),
) -> tuple[np.ndarray, np.ndarray]:
    """
    Brute-force double-loop estimates of first-order and total indices.

    First order: variance over x_i of the inner mean over the other inputs. Total: mean over
    the other inputs of the inner variance over x_i. Both loops use scrambled Sobol' points.
    """
    dim = 3
    lo, width = -np.pi, 2.0 * np.pi

    def points(d: int, n: int, stream: int) -> np.ndarray:
        sampler = qmc.Sobol(d=d, scramble=True, seed=derive_seed(seed, stream))
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', UserWarning)
            return lo + width * sampler.random(n)

    pooled = fn(points(dim, n_outer * n_inner, 0))
    variance = pooled.var()
    s1 = np.empty(dim)
    st = np.empty(dim)
    for i in range(dim):
        rest = [j for j in range(dim) if j != i]
        outer = points(1, n_outer, 1 + 2 * i)[:, 0]
        inner = points(dim - 1, n_inner, 2 + 2 * i)
        x = np.empty((n_outer, n_inner, dim))
        x[..., i] = outer[:, None]
        x[..., rest] = inner[None, :, :]
        s1[i] = fn(x).mean(axis=1).var() / variance

        outer_rest = points(dim - 1, n_outer, 101 + 2 * i)
        inner_i = points(1, n_inner, 102 + 2 * i)[:, 0]
        x = np.empty((n_outer, n_inner, dim))
        x[..., rest] = outer_rest[:, None, :]
        x[..., i] = inner_i[None, :]
        st[i] = fn(x).var(axis=1).mean() / variance
    return s1, st


# Start values of the decay family's eight traces, shaped like a pressure/volume state.
EXPONENTIAL_Z0 = np.array([8.0, 10.0, 4.0, 15.0, 80.0, 120.0, 70.0, 130.0])


@dataclass(frozen=True)
class ExponentialFamily:
    """dz/dt = -k z for every trace, so z(t) = z0 exp(-k t)."""

    lower: float = 0.5
    upper: float = 3.0

    @property
    def space(self) -> ParameterSpace:
        return ParameterSpace((ParameterSpec('k', '1/s', self.lower, self.upper),))

    def trajectory(
        self, k: float, ctx: CycleContext, z0: np.ndarray = EXPONENTIAL_Z0
    ) -> Trajectory:
        times = ctx.times
        states = np.asarray(z0, dtype=np.float64)[None, :] * np.exp(-k * times)[:, None]
        return Trajectory(ctx, times, states, PHYSICAL_LABELS)

    def vector_field(self, k: float) -> VectorField:
        def field(z: np.ndarray, t: float, theta: np.ndarray, ctx: CycleContext) -> np.ndarray:
            return -k * np.asarray(z)

        return field


def exponential_dataset(
    n_samples: int,
    seed: int,
    t_hb: float = 0.854,
    dt: float = 1e-3,
    n_test: int = 0,
    family: ExponentialFamily = ExponentialFamily(),
) -> Dataset:
    space = family.space
    ks = design_points(space, n_samples, seed)[:, 0]
    test_idx = set(make_rng(seed, _STREAM_SPLIT).choice(n_samples, n_test, replace=False).tolist())
    ctx = CycleContext(t_hb, 0.0, dt)
    samples: list[TrainingSample] = [
        sample_from_trajectory(
            f'sample_{idx:05d}',
            np.array([k]),
            family.trajectory(float(k), ctx),
            split='test' if idx in test_idx else 'train',
        )
        for idx, k in enumerate(ks)
    ]
    provenance = {'generator': 'exponential-decay/1', 't_hb': t_hb, 'dt': dt, 'n_test': n_test}
    return Dataset(space, tuple(samples), provenance, seed)


@dataclass(frozen=True)
class AnalyticSuite:
    additive: AdditiveMap
    ishigami: IshigamiFunction
    exponential: ExponentialFamily


def analytic_systems() -> AnalyticSuite:
    return AnalyticSuite(AdditiveMap(), IshigamiFunction(), ExponentialFamily())
