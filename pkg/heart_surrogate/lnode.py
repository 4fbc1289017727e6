"""
Latent neural ODE over one heartbeat.

The network sees normalized states ẑ = (z - center) / scale, the two periodic inputs and the
parameters mapped onto [-1, 1]; its output is read as dẑ/dt · T_HB. Integration is forward Euler
on a fixed grid, done in normalized coordinates (the affine image of the physical scheme).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Optional, Protocol, Sequence, Union

import numpy as np

from heart_surrogate.ann import (
    AnnArchitecture,
    AnnWeights,
    backward,
    forward,
    forward_with_memory,
)
from heart_surrogate.errors import (
    ConfigurationError,
    DatasetError,
    DivergenceError,
    InputShapeError,
)
from heart_surrogate.parameters import ParameterSpace
from heart_surrogate.utils import floats_from_hex, floats_to_hex

if TYPE_CHECKING:
    from heart_surrogate.dataset import TrainingSample

logger = logging.getLogger(__name__)

PHYSICAL_LABELS = ('p_LA', 'p_LV', 'p_RA', 'p_RV', 'V_LA', 'V_LV', 'V_RA', 'V_RV')
AV_DELAY = 'AV_delay'
N_PHYSICAL = len(PHYSICAL_LABELS)
CHECKPOINT_FORMAT_VERSION = 1


def state_labels(n_states: int) -> tuple[str, ...]:
    if n_states < N_PHYSICAL:
        raise ConfigurationError(f'At least {N_PHYSICAL} states are required, got {n_states}')
    return PHYSICAL_LABELS + tuple(f'z_lat_{i}' for i in range(n_states - N_PHYSICAL))


@dataclass(frozen=True)
class CycleContext:
    t_hb: float
    av_delay: float = 0.0
    dt: float = 1e-3

    def __post_init__(self) -> None:
        if not self.t_hb > 0 or not self.dt > 0:
            raise ConfigurationError(f'Heartbeat period and step must be positive, got {self!r}')
        if self.n_full_steps < 2:
            raise ConfigurationError(f'Cycle must span at least 2 steps, got {self!r}')

    @property
    def n_full_steps(self) -> int:
        ratio = self.t_hb / self.dt
        nearest = round(ratio)
        if abs(ratio - nearest) <= 1e-9 * max(1.0, ratio):
            return int(nearest)
        return int(np.floor(ratio))

    @property
    def has_remainder(self) -> bool:
        return self.t_hb - self.n_full_steps * self.dt > 1e-12 * self.t_hb

    @property
    def times(self) -> np.ndarray:
        times = np.arange(self.n_full_steps + 1) * self.dt
        if self.has_remainder:
            times = np.append(times, self.t_hb)
        return times

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    def with_av_delay(self, av_delay: float) -> CycleContext:
        return replace(self, av_delay=float(av_delay))


def periodic_inputs(
    t: Union[float, np.ndarray], ctx: CycleContext
) -> tuple[np.ndarray, np.ndarray]:
    return _phase_inputs(t, ctx.av_delay, ctx.t_hb)


def _phase_inputs(
    t: Union[float, np.ndarray], av_delay: Union[float, np.ndarray], t_hb: float
) -> tuple[np.ndarray, np.ndarray]:
    phase = 2.0 * np.pi * (np.asarray(t) - np.asarray(av_delay)) / t_hb
    return np.cos(phase), np.sin(phase)


@dataclass(frozen=True, eq=False)
class Trajectory:
    context: CycleContext
    times: np.ndarray
    states: np.ndarray
    labels: tuple[str, ...] = field(default=PHYSICAL_LABELS)

    def __post_init__(self) -> None:
        if self.states.shape != (len(self.times), len(self.labels)):
            raise InputShapeError(
                f'Trajectory states {self.states.shape} do not match '
                f'{len(self.times)} times x {len(self.labels)} labels'
            )

    @property
    def physical(self) -> np.ndarray:
        return self.states[:, :N_PHYSICAL]

    def trace(self, label: str) -> np.ndarray:
        return self.states[:, self.labels.index(label)]


class VectorField(Protocol):
    def __call__(
        self, z: np.ndarray, t: float, theta: np.ndarray, ctx: CycleContext
    ) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class LnodeModel:
    weights: AnnWeights
    parameter_space: ParameterSpace
    state_center: np.ndarray
    state_scale: np.ndarray
    latent_ic: np.ndarray
    # Training cycle: period, grid step and the mean physical initial state, used whenever a
    # caller (GSA, calibration) has no per-sample initial condition of its own.
    t_hb: float
    dt: float
    z0_reference: np.ndarray
    default_av_delay: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        arch = self.weights.arch
        n_states = arch.output_dim
        state_labels(n_states)
        if arch.input_dim != n_states + 2 + self.parameter_space.dim:
            raise InputShapeError(
                f'Network input {arch.input_dim} != {n_states} states + 2 periodic inputs + '
                f'{self.parameter_space.dim} parameters'
            )
        for name, size in (
            ('state_center', n_states),
            ('state_scale', n_states),
            ('latent_ic', n_states - N_PHYSICAL),
            ('z0_reference', N_PHYSICAL),
        ):
            value = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if value.size != size:
                raise InputShapeError(f'`{name}` needs {size} entries, got {value.size}')
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if np.any(self.state_scale <= 0):
            raise ConfigurationError('State scales must be positive')

    @property
    def n_states(self) -> int:
        return self.weights.arch.output_dim

    @property
    def n_latent(self) -> int:
        return self.n_states - N_PHYSICAL

    @property
    def labels(self) -> tuple[str, ...]:
        return state_labels(self.n_states)

    @property
    def trainable(self) -> np.ndarray:
        return np.concatenate([self.weights.flat, self.latent_ic])

    def with_trainable(self, values: np.ndarray) -> LnodeModel:
        n_w = self.weights.flat.size
        values = np.asarray(values, dtype=np.float64)
        return replace(
            self,
            weights=self.weights.replace_flat(values[:n_w]),
            latent_ic=values[n_w:],
        )

    def normalize_state(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z, dtype=np.float64) - self.state_center) / self.state_scale

    def denormalize_state(self, zhat: np.ndarray) -> np.ndarray:
        return self.state_center + np.asarray(zhat) * self.state_scale

    def cycle(self, av_delay: Optional[float] = None) -> CycleContext:
        return CycleContext(
            self.t_hb, self.default_av_delay if av_delay is None else float(av_delay), self.dt
        )

    def row_delays(self, thetas: np.ndarray, av_delay: Optional[float] = None) -> np.ndarray:
        """
        Phase delay of each parameter row: its own `AV_delay` column when the model is
        parameterized by it, else `av_delay` (default: the training delay) for every row.
        """
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        if AV_DELAY in self.parameter_space.names:
            return thetas[:, self.parameter_space.index(AV_DELAY)].copy()
        return np.full(thetas.shape[0], self.cycle(av_delay).av_delay)

    def __call__(
        self, z: np.ndarray, t: float, theta: np.ndarray, ctx: CycleContext
    ) -> np.ndarray:
        return rhs(self, z, t, theta, ctx)


def network_inputs(
    zhat: np.ndarray, c: np.ndarray, s: np.ndarray, theta_norm: np.ndarray
) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    return np.concatenate([zhat, c[..., None], s[..., None], theta_norm], axis=-1)


def rhs(
    model: LnodeModel, z: np.ndarray, t: float, theta: np.ndarray, ctx: CycleContext
) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.n_states:
        raise InputShapeError(f'Model has {model.n_states} states, got {z.shape}')
    theta_norm = model.parameter_space.normalize(theta)
    c, s = periodic_inputs(t, ctx)
    c = np.broadcast_to(c, z.shape[:-1])
    s = np.broadcast_to(s, z.shape[:-1])
    theta_norm = np.broadcast_to(theta_norm, z.shape[:-1] + theta_norm.shape[-1:])
    out = forward(model.weights, network_inputs(model.normalize_state(z), c, s, theta_norm))
    return model.state_scale * out / ctx.t_hb


@dataclass(frozen=True, eq=False)
class Rollout:
    """Batched normalized Euler solution plus the per-step network memory for backprop."""

    context: CycleContext
    states: np.ndarray
    memories: list[list[np.ndarray]]


def rollout(
    model: LnodeModel,
    zhat0: np.ndarray,
    theta_norm: np.ndarray,
    av_delay: np.ndarray,
    ctx: CycleContext,
    keep_memory: bool = True,
    sample_ids: Optional[Sequence[str]] = None,
) -> Rollout:
    """
    Integrate a batch of B cycles sharing one grid.

    zhat0 is (B, N_z), theta_norm (B, N_P), av_delay (B,). States come back as (B, n+1, N_z).
    """
    zhat0 = np.atleast_2d(np.asarray(zhat0, dtype=np.float64))
    theta_norm = np.atleast_2d(np.asarray(theta_norm, dtype=np.float64))
    av_delay = np.broadcast_to(np.asarray(av_delay, dtype=np.float64), zhat0.shape[:1])
    times = ctx.times
    steps = np.diff(times)
    states = np.empty((zhat0.shape[0], len(times), model.n_states))
    states[:, 0] = zhat0
    memories: list[list[np.ndarray]] = []
    for k, h in enumerate(steps):
        c, s = _phase_inputs(times[k], av_delay, ctx.t_hb)
        out, memory = forward_with_memory(
            model.weights, network_inputs(states[:, k], c, s, theta_norm)
        )
        nxt = states[:, k] + (h / ctx.t_hb) * out
        finite = np.isfinite(nxt).all(axis=-1)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise DivergenceError(
                'Non-finite LNODE state',
                step=k + 1,
                sample_id=None if sample_ids is None else sample_ids[bad],
            )
        states[:, k + 1] = nxt
        if keep_memory:
            memories.append(memory)
    return Rollout(ctx, states, memories)


def rollout_vjp(
    model: LnodeModel, roll: Rollout, state_cotangents: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Discrete adjoint of `rollout`.

    `state_cotangents[b, k]` is dL/dẑ_k for batch row b. Returns the flat weight gradient summed
    over the batch, dL/dẑ_0 per row, and dL/dθ̂ per row.
    """
    if not roll.memories:
        raise ConfigurationError('Rollout was recorded without network memory')
    n_states = model.n_states
    steps = roll.context.steps
    scale = 1.0 / roll.context.t_hb
    adjoint = np.array(state_cotangents[:, -1], dtype=np.float64)
    grad_w = np.zeros_like(model.weights.flat)
    grad_theta = np.zeros((adjoint.shape[0], model.parameter_space.dim))
    for k in range(len(steps) - 1, -1, -1):
        g_in, g_w = backward(model.weights, roll.memories[k], adjoint * (steps[k] * scale))
        grad_w += g_w
        grad_theta += g_in[:, n_states + 2 :]
        adjoint = adjoint + g_in[:, :n_states] + state_cotangents[:, k]
    return grad_w, adjoint, grad_theta


def integrate(
    field: VectorField, z0: np.ndarray, theta: np.ndarray, ctx: CycleContext
) -> Trajectory:
    z0 = np.asarray(z0, dtype=np.float64).reshape(-1)
    theta = np.asarray(theta, dtype=np.float64)
    times = ctx.times
    if isinstance(field, LnodeModel):
        if z0.size != field.n_states:
            raise InputShapeError(f'Model has {field.n_states} states, got {z0.size}')
        roll = rollout(
            field,
            field.normalize_state(z0)[None],
            field.parameter_space.normalize(theta)[None],
            np.array([ctx.av_delay]),
            ctx,
            keep_memory=False,
        )
        return Trajectory(ctx, times, field.denormalize_state(roll.states[0]), field.labels)

    states = np.empty((len(times), z0.size))
    states[0] = z0
    for k, h in enumerate(np.diff(times)):
        nxt = states[k] + h * np.asarray(field(states[k], times[k], theta, ctx))
        if not np.isfinite(nxt).all():
            raise DivergenceError('Non-finite state', step=k + 1)
        states[k + 1] = nxt
    labels = state_labels(z0.size) if z0.size >= N_PHYSICAL else tuple(
        f'z_{i}' for i in range(z0.size)
    )
    return Trajectory(ctx, times, states, labels)


def assemble_initial_state(sample: TrainingSample, model: LnodeModel) -> np.ndarray:
    physical = np.asarray(sample.initial_state, dtype=np.float64).reshape(-1)
    if physical.size != N_PHYSICAL or not np.isfinite(physical).all():
        raise DatasetError(
            f'Sample {sample.sample_id} needs {N_PHYSICAL} finite initial values, got {physical}'
        )
    # latent block has center 0 and scale 1, so its normalized and physical values coincide
    return np.concatenate([physical, model.latent_ic])


def save_checkpoint(model: LnodeModel, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(checkpoint_to_json(model), indent=2, sort_keys=True))
    logger.info('Wrote checkpoint %s', path)


def checkpoint_to_json(model: LnodeModel) -> dict[str, Any]:
    return {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'architecture': model.weights.arch.to_json(),
        'seed': model.seed,
        'weights': floats_to_hex(model.weights.flat),
        'normalization': {
            'center': floats_to_hex(model.state_center),
            'scale': floats_to_hex(model.state_scale),
        },
        'state_labels': list(model.labels),
        'latent_ic': floats_to_hex(model.latent_ic),
        'parameter_space': model.parameter_space.to_json(),
        't_hb': model.t_hb,
        'dt': model.dt,
        'z0_reference': floats_to_hex(model.z0_reference),
        'default_av_delay': model.default_av_delay,
    }


def checkpoint_from_json(data: dict[str, Any]) -> LnodeModel:
    version = data.get('format_version')
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DatasetError(f'Unsupported checkpoint format version {version!r}')
    arch = AnnArchitecture.from_json(data['architecture'])
    model = LnodeModel(
        weights=AnnWeights(arch, floats_from_hex(data['weights'])),
        parameter_space=ParameterSpace.from_json(data['parameter_space']),
        state_center=floats_from_hex(data['normalization']['center']),
        state_scale=floats_from_hex(data['normalization']['scale']),
        latent_ic=floats_from_hex(data['latent_ic']),
        t_hb=float(data['t_hb']),
        dt=float(data['dt']),
        z0_reference=floats_from_hex(data['z0_reference']),
        default_av_delay=float(data.get('default_av_delay', 0.0)),
        seed=data.get('seed'),
    )
    if tuple(data.get('state_labels', model.labels)) != model.labels:
        raise DatasetError(f'Checkpoint state labels {data["state_labels"]} are not recognized')
    return model


def load_checkpoint(path: Union[str, Path]) -> LnodeModel:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f'Could not read checkpoint {path}: {exc}') from exc
    return checkpoint_from_json(data)


def write_trajectory_csv(traj: Trajectory, path: Union[str, Path]) -> None:
    table = np.column_stack([traj.times, traj.states])
    np.savetxt(
        path, table, fmt='%.17g', delimiter=',', header=','.join(('t',) + traj.labels), comments=''
    )


def read_trajectory_csv(path: Union[str, Path], av_delay: float = 0.0) -> Trajectory:
    path = Path(path)
    try:
        with path.open() as fh:
            header = fh.readline().strip().split(',')
        table = np.loadtxt(path, delimiter=',', skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DatasetError(f'Could not read trajectory {path}: {exc}') from exc
    if header[0] != 't' or tuple(header[1 : 1 + N_PHYSICAL]) != PHYSICAL_LABELS:
        raise DatasetError(f'Trajectory {path} has unexpected header {header}')
    if table.shape[1] != len(header) or table.shape[0] < 3:
        raise DatasetError(f'Trajectory {path} has a malformed table {table.shape}')
    times = table[:, 0]
    dt = float(times[1] - times[0])
    ctx = CycleContext(float(times[-1]), av_delay, dt)
    return Trajectory(ctx, times, table[:, 1:], tuple(header[1:]))
