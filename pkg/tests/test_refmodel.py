import numpy as np
from pytest import approx, fixture, mark, raises

from heart_surrogate.errors import ConfigurationError
from heart_surrogate.lnode import CycleContext, integrate
from heart_surrogate.parameters import ParameterSpace, ParameterSpec
from heart_surrogate.refmodel import (
    BENCHMARK_PARAMETERS,
    CIRCULATION_DEFAULTS,
    INITIAL_VOLUMES,
    AdditiveMap,
    CirculationSettings,
    ExponentialFamily,
    IshigamiFunction,
    activation,
    analytic_systems,
    benchmark_space,
    circulation_space,
    design_points,
    generate_dataset,
    ishigami_analytic,
    ishigami_oracle,
    pv_loop_area,
    simulate_batch,
    simulate_circulation,
)

FINE = CirculationSettings(n_beats=3, dt_integration=2e-4, dt_output=2e-4)


@fixture(scope='module')
def afterload_runs():
    space = circulation_space(['R_sys']).with_bounds([0.5], [2.0])
    r_sys = CIRCULATION_DEFAULTS['R_sys']
    return simulate_batch(np.array([[r_sys], [2.0 * r_sys]]), space, FINE)


def test_spaces():
    assert circulation_space().names == (
        'Emax_LA', 'Emax_RA', 'Emax_LV', 'Emin_LV', 'Emax_RV', 'Emin_RV', 'AV_delay',
        'R_sys', 'R_pulm',
    )
    assert 'T_HB' in circulation_space(include_t_hb=True)
    assert benchmark_space().names == BENCHMARK_PARAMETERS


def test_unknown_parameter_is_rejected():
    space = ParameterSpace((ParameterSpec('C_sa', '', 1.0, 2.0),))
    with raises(ConfigurationError):
        simulate_batch(np.array([[1.5]]), space, FINE)


def test_activation_shape():
    t = np.linspace(0.0, 0.8, 801)
    act = activation(t, 0.16, 0.8, (0.35, 0.2))
    assert act.min() >= 0.0 and act.max() == approx(1.0, abs=1e-6)
    assert act[0] == 0.0
    assert act[int(round((0.16 + 0.28) * 1000))] == approx(1.0)


def test_blood_volume_is_conserved(afterload_runs):
    for run in afterload_runs:
        assert run.total_volume == approx(INITIAL_VOLUMES.sum(), rel=1e-10)


def test_states_stay_positive(afterload_runs):
    for run in afterload_runs:
        assert np.all(run.trajectory.states > 0)
        assert run.trajectory.times[-1] == approx(CIRCULATION_DEFAULTS['T_HB'])


def test_higher_afterload_raises_arterial_pressure(afterload_runs):
    base, doubled = afterload_runs
    assert doubled.arterial_pressure.mean() > base.arterial_pressure.mean()
    assert doubled.stroke_volumes[-1] < base.stroke_volumes[-1]


def test_pv_loop_quadratures_agree(afterload_runs):
    traj = afterload_runs[0].trajectory
    p, v = traj.trace('p_LV'), traj.trace('V_LV')
    trapezoid = pv_loop_area(p, v)
    simpson = pv_loop_area(p, v, method='simpson', dt=FINE.dt_output)
    assert abs(trapezoid) > 1000.0
    assert simpson == approx(trapezoid, rel=5e-3)


def test_pv_loop_of_a_rectangle():
    v = np.array([0.0, 1.0, 1.0, 0.0])
    p = np.array([0.0, 0.0, 2.0, 2.0])
    # counter-clockwise in the (V, p) plane
    assert pv_loop_area(p, v) == approx(-2.0)
    with raises(ConfigurationError):
        pv_loop_area(p, v, method='midpoint')


def test_simulate_circulation_uses_context_grid():
    space = benchmark_space()
    theta = space.vector(CIRCULATION_DEFAULTS)
    ctx = CycleContext(0.8, 0.16, 2e-3)
    settings = CirculationSettings(n_beats=2, dt_integration=5e-4)
    run = simulate_circulation(theta, space, ctx, settings=settings)
    assert np.array_equal(run.trajectory.times, ctx.times)
    assert run.trajectory.context == ctx
    assert run.stroke_volumes.shape == (2,)


def test_settings_validation():
    with raises(ConfigurationError):
        CirculationSettings(n_beats=1)
    with raises(ConfigurationError):
        CirculationSettings(dt_integration=1e-2, dt_output=1e-3)
    with raises(ConfigurationError):
        CirculationSettings(fixed={'C_sa': 1.0})


def test_design_points_are_seeded_and_inside():
    space = circulation_space()
    a = design_points(space, 64, seed=5)
    assert np.array_equal(a, design_points(space, 64, seed=5))
    assert not np.array_equal(a, design_points(space, 64, seed=6))
    assert np.all(a >= space.lower) and np.all(a <= space.upper)


def test_generate_dataset_splits():
    settings = CirculationSettings(n_beats=2, dt_integration=5e-4, dt_output=2e-3)
    dataset = generate_dataset(benchmark_space(), 3, seed=1, settings=settings, n_test=1)
    assert len(dataset) == 3
    assert [s.split for s in dataset.samples].count('test') == 1
    assert dataset.generator['generator'] == 'circulation-0d/1'
    assert dataset.shared_period() == 0.8
    with raises(ConfigurationError):
        generate_dataset(benchmark_space(), 3, seed=1, settings=settings, n_test=4)


class TestAnalyticSystems:
    def test_additive_indices(self):
        s1, st = AdditiveMap().analytic_indices()
        assert s1 == approx(np.array([1.0, 4.0, 9.0]) / 14.0)
        assert st == approx(s1)

    def test_additive_inputs_have_unit_variance(self):
        space = AdditiveMap().space
        assert space.width == approx(np.full(3, 2.0 * np.sqrt(3.0)))

    def test_ishigami_closed_form(self):
        s1, st = ishigami_analytic()
        assert s1 == approx([0.3139, 0.4424, 0.0], abs=1e-4)
        assert st == approx([0.5576, 0.4424, 0.2437], abs=1e-4)

    def test_ishigami_value(self):
        fn = IshigamiFunction()
        assert fn(np.array([np.pi / 2, np.pi / 2, 1.0])) == approx(1.0 + 7.0 + 0.1)

    @mark.parametrize('seed', [0, 1])
    def test_double_loop_oracle(self, seed):
        s1, st = ishigami_oracle(n_outer=256, n_inner=256, seed=seed)
        exact_s1, exact_st = ishigami_analytic()
        assert s1 == approx(exact_s1, abs=0.03)
        assert st == approx(exact_st, abs=0.03)

    def test_exponential_trajectory_solves_its_field(self):
        family = ExponentialFamily()
        ctx = CycleContext(0.5, dt=1e-4)
        exact = family.trajectory(1.3, ctx)
        euler = integrate(family.vector_field(1.3), exact.states[0], np.array([1.3]), ctx)
        assert euler.states == approx(exact.states, rel=1e-3)

    def test_suite_bundles_every_system(self):
        suite = analytic_systems()
        assert suite.additive.space.dim == 3
        assert suite.ishigami.space.dim == 3
        assert suite.exponential.space.names == ('k',)
