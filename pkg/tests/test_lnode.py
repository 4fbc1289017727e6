import numpy as np
from pytest import approx, mark, raises

from heart_surrogate.dataset import TrainingSample
from heart_surrogate.errors import (
    ConfigurationError,
    DatasetError,
    DivergenceError,
    InputShapeError,
    ParameterShapeError,
)
from heart_surrogate.lnode import (
    PHYSICAL_LABELS,
    CycleContext,
    assemble_initial_state,
    checkpoint_from_json,
    checkpoint_to_json,
    integrate,
    load_checkpoint,
    periodic_inputs,
    read_trajectory_csv,
    rhs,
    rollout,
    rollout_vjp,
    save_checkpoint,
    state_labels,
    write_trajectory_csv,
)
from heart_surrogate.refmodel import EXPONENTIAL_Z0, ExponentialFamily
from tests.helpers import TOY_CENTER, central_difference, relative_error, toy_model


class TestCycleContext:
    def test_exact_division(self):
        ctx = CycleContext(0.854, dt=1e-3)
        assert ctx.n_full_steps == 854
        assert len(ctx.times) == 855
        assert ctx.times[-1] == approx(0.854, abs=1e-12)

    def test_remainder_step_ends_on_period(self):
        ctx = CycleContext(0.8545, dt=1e-3)
        assert ctx.n_full_steps == 854
        assert len(ctx.times) == 856
        assert ctx.times[-1] == 0.8545
        assert ctx.steps[-1] == approx(5e-4)

    def test_too_short_cycle(self):
        with raises(ConfigurationError):
            CycleContext(1e-3, dt=1e-3)

    def test_periodic_inputs_shift_with_delay(self):
        ctx = CycleContext(0.8, av_delay=0.2)
        c, s = periodic_inputs(0.2, ctx)
        assert (float(c), float(s)) == approx((1.0, 0.0))
        c, s = periodic_inputs(0.4, ctx)
        assert (float(c), float(s)) == approx((0.0, 1.0), abs=1e-12)


def test_state_labels():
    assert state_labels(8) == PHYSICAL_LABELS
    assert state_labels(10)[-2:] == ('z_lat_0', 'z_lat_1')
    with raises(ConfigurationError):
        state_labels(7)


def test_euler_matches_closed_form_recursion():
    family = ExponentialFamily()
    k = 1.7
    ctx = CycleContext(0.854, dt=1e-3)
    traj = integrate(family.vector_field(k), EXPONENTIAL_Z0, np.array([k]), ctx)
    expected = EXPONENTIAL_Z0 * (1.0 - k * 1e-3) ** 854
    assert traj.states[-1] == approx(expected, rel=1e-12)


def test_euler_global_error_is_first_order():
    family = ExponentialFamily()
    k = 2.0
    errors = []
    for dt in (1e-3, 5e-4):
        ctx = CycleContext(0.854, dt=dt)
        traj = integrate(family.vector_field(k), EXPONENTIAL_Z0, np.array([k]), ctx)
        errors.append(np.max(np.abs(traj.states[-1] - family.trajectory(k, ctx).states[-1])))
    # leading error term of forward Euler on z' = -k z
    theory = 0.5 * k**2 * 0.854 * 1e-3 * np.exp(-k * 0.854) * EXPONENTIAL_Z0.max()
    assert errors[0] == approx(theory, rel=0.01)
    assert errors[0] / errors[1] == approx(2.0, rel=0.2)


def test_rhs_shape_checks():
    model = toy_model()
    ctx = model.cycle()
    with raises(InputShapeError):
        rhs(model, np.zeros(7), 0.0, np.ones(2), ctx)
    with raises(ParameterShapeError):
        rhs(model, TOY_CENTER, 0.0, np.ones(3), ctx)


def test_integrate_model_matches_rhs_euler():
    model = toy_model(n_latent=2)
    ctx = model.cycle(0.03)
    theta = np.array([0.9, 1.1])
    z0 = np.concatenate([TOY_CENTER, [0.1, -0.2]])
    traj = integrate(model, z0, theta, ctx)
    z = z0.copy()
    for t, h in zip(ctx.times[:-1], ctx.steps):
        z = z + h * rhs(model, z, t, theta, ctx)
    assert traj.states[-1] == approx(z, rel=1e-9)
    assert traj.labels == state_labels(10)


def test_rollout_divergence_names_sample():
    model = toy_model(hidden_layers=0, weight_scale=1e40)
    ctx = model.cycle()
    with raises(DivergenceError) as err:
        rollout(model, np.ones((2, 8)), np.zeros((2, 2)), np.zeros(2), ctx, sample_ids=['a', 'b'])
    assert err.value.sample_id == 'a'


@mark.parametrize('seed', range(5))
def test_rollout_vjp_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = toy_model(n_latent=1, seed=seed)
    ctx = model.cycle(0.05)
    zhat0 = 0.3 * rng.standard_normal((2, model.n_states))
    theta_norm = rng.uniform(-1, 1, (2, 2))
    delays = np.array([0.0, 0.05])
    cot = rng.standard_normal((2, len(ctx.times), model.n_states))

    def objective(flat=None, z=zhat0, th=theta_norm):
        m = model if flat is None else model.with_trainable(np.concatenate([flat, model.latent_ic]))
        roll = rollout(m, z, th, delays, ctx, keep_memory=False)
        return float(np.sum(roll.states * cot))

    roll = rollout(model, zhat0, theta_norm, delays, ctx)
    grad_w, grad_z0, grad_theta = rollout_vjp(model, roll, cot)
    fd_w = central_difference(lambda w: objective(flat=w), model.weights.flat, 1e-6)
    fd_z = central_difference(lambda z: objective(z=z.reshape(zhat0.shape)), zhat0.ravel(), 1e-6)
    fd_t = central_difference(
        lambda t: objective(th=t.reshape(theta_norm.shape)), theta_norm.ravel(), 1e-6
    )
    assert relative_error(grad_w, fd_w) <= 1e-5
    assert relative_error(grad_z0.ravel(), fd_z) <= 1e-5
    assert relative_error(grad_theta.ravel(), fd_t) <= 1e-5


def test_checkpoint_is_bit_exact(tmp_path):
    model = toy_model(n_latent=2, seed=4)
    path = tmp_path / 'ckpt.json'
    save_checkpoint(model, path)
    restored = load_checkpoint(path)
    assert np.array_equal(restored.trainable, model.trainable)
    assert np.array_equal(restored.state_scale, model.state_scale)
    assert restored.parameter_space == model.parameter_space
    theta = np.array([1.0, 1.2])
    a = integrate(model, np.concatenate([TOY_CENTER, model.latent_ic]), theta, model.cycle())
    b = integrate(restored, np.concatenate([TOY_CENTER, model.latent_ic]), theta, model.cycle())
    assert np.array_equal(a.states, b.states)


def test_checkpoint_version_is_checked():
    data = checkpoint_to_json(toy_model())
    data['format_version'] = 99
    with raises(DatasetError):
        checkpoint_from_json(data)


def test_trajectory_csv(tmp_path):
    ctx = CycleContext(0.05, 0.01, 0.01)
    traj = ExponentialFamily().trajectory(1.0, ctx)
    write_trajectory_csv(traj, tmp_path / 'traj.csv')
    back = read_trajectory_csv(tmp_path / 'traj.csv', av_delay=0.01)
    assert back.labels == PHYSICAL_LABELS
    assert np.array_equal(back.states, traj.states)
    assert back.context.av_delay == 0.01


def test_initial_state_carries_latent_block():
    model = toy_model(n_latent=2)
    ctx = model.cycle()
    sample = TrainingSample(
        's', np.array([1.0, 1.0]), ctx.times, np.tile(TOY_CENTER, (len(ctx.times), 1)), 0.2, 0.0
    )
    z0 = assemble_initial_state(sample, model)
    assert z0[:8] == approx(TOY_CENTER)
    assert z0[8:] == approx(model.latent_ic)


def test_unit_decay_oracle():
    def decay(z, t, theta, ctx):
        return -z

    ctx = CycleContext(0.854, dt=1e-3)
    traj = integrate(decay, np.array([1.0]), np.array([]), ctx)
    assert traj.labels == ('z_0',)
    assert abs(traj.states[-1, 0] - np.exp(-0.854)) <= 5e-4


def test_periodic_inputs_lie_on_unit_circle():
    ctx = CycleContext(0.854, av_delay=0.16, dt=1e-3)
    c, s = periodic_inputs(ctx.times, ctx)
    assert np.max(np.abs(c**2 + s**2 - 1.0)) <= 1e-14
    c, s = periodic_inputs(0.16 + 0.854, ctx)
    assert (float(c), float(s)) == approx((1.0, 0.0), abs=1e-12)
