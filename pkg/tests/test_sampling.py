import json
import math

import numpy as np
from pytest import approx, fixture, raises

from heart_surrogate.errors import ConfigurationError
from heart_surrogate.sampling import (
    DualAveraging,
    NutsConfig,
    PosteriorChain,
    gelman_rubin,
    nuts_sample,
    read_chain_csv,
)

LONG = NutsConfig(iters=4500, burn_in=500, step_size=0.1)


def gaussian(cov):
    precision = np.linalg.inv(np.asarray(cov, dtype=np.float64))

    def log_density(q):
        g = -precision @ q
        return 0.5 * float(q @ g), g

    return log_density


@fixture(scope='module')
def standard_chain():
    return nuts_sample(gaussian(np.eye(2)), np.zeros(2), LONG, seed=0)


def test_standard_normal_moments(standard_chain):
    chain = standard_chain
    assert chain.n_kept == 4000
    assert chain.draws.mean(axis=0) == approx(np.zeros(2), abs=0.05)
    cov = np.cov(chain.draws, rowvar=False)
    assert np.diag(cov) == approx(np.ones(2), rel=0.1)
    assert abs(cov[0, 1]) <= 0.1
    assert chain.divergences == 0
    assert not chain.invalid


def test_standard_normal_chain_converges(standard_chain):
    rhat, flat = gelman_rubin(standard_chain)
    assert np.all(rhat < 1.1)
    assert not flat.any()
    summary = standard_chain.summary(truth=np.zeros(2))
    assert summary['converged'] is True
    assert summary['truth_within_2sigma'] == [True, True]


def test_step_size_adapts_during_burn_in(standard_chain):
    assert standard_chain.step_size != LONG.step_size
    assert 0.5 <= standard_chain.accept_rate <= 1.0


def test_correlated_gaussian():
    cov = np.array([[1.0, 0.8], [0.8, 1.0]])
    chain = nuts_sample(gaussian(cov), np.array([1.0, -1.0]), LONG, seed=1)
    corr = np.corrcoef(chain.draws, rowvar=False)[0, 1]
    assert corr == approx(0.8, abs=0.1)
    assert chain.divergences == 0


def test_fixed_step_is_kept():
    cfg = NutsConfig(iters=60, burn_in=20, step_size=0.3, adapt_step=False)
    chain = nuts_sample(gaussian(np.eye(3)), np.zeros(3), cfg, seed=2)
    assert chain.step_size == 0.3
    assert chain.draws.shape == (40, 3)
    assert chain.tree_depths.max() <= cfg.max_tree_depth


def test_sampler_is_seeded():
    cfg = NutsConfig(iters=50, burn_in=10, step_size=0.2)
    a = nuts_sample(gaussian(np.eye(2)), np.zeros(2), cfg, seed=5)
    b = nuts_sample(gaussian(np.eye(2)), np.zeros(2), cfg, seed=5)
    assert np.array_equal(a.draws, b.draws)


def test_transform_and_names():
    cfg = NutsConfig(iters=40, burn_in=10, step_size=0.2)
    chain = nuts_sample(
        gaussian(np.eye(2)), np.zeros(2), cfg, seed=0, transform=np.exp, names=['a', 'b']
    )
    assert chain.names == ('a', 'b')
    assert np.all(chain.draws > 0)


def test_cliff_produces_divergences():
    def cliff(q):
        if abs(q[0]) < 1.0:
            return -0.5 * float(q @ q), -q
        return -1e10, np.zeros_like(q)

    cfg = NutsConfig(iters=200, burn_in=20, step_size=0.9, adapt_step=False)
    chain = nuts_sample(cliff, np.zeros(1), cfg, seed=0)
    assert chain.divergences + chain.burn_in_divergences > 0
    assert np.all(np.abs(chain.draws) < 1.0)


def test_start_must_have_finite_density():
    def nowhere(q):
        return -math.inf, np.zeros_like(q)

    with raises(ConfigurationError):
        nuts_sample(nowhere, np.zeros(2), NutsConfig(iters=10, burn_in=0))


class TestNutsConfig:
    def test_burn_in_must_leave_draws(self):
        with raises(ConfigurationError):
            NutsConfig(iters=100, burn_in=100)

    def test_step_size_positive(self):
        with raises(ConfigurationError):
            NutsConfig(step_size=0.0)

    def test_target_acceptance_range(self):
        with raises(ConfigurationError):
            NutsConfig(target_accept=1.0)


def test_dual_averaging_rests_at_target():
    adapt = DualAveraging(mu=math.log(0.5), log_eps=math.log(0.05))
    for _ in range(20):
        eps = adapt.update(0.8, 0.8)
    assert eps == approx(0.5)
    assert adapt.final() == approx(0.5)


def test_dual_averaging_shrinks_step_on_rejection():
    adapt = DualAveraging(mu=math.log(1.0), log_eps=0.0)
    assert adapt.update(0.0, 0.8) < 1.0


class TestSplitRhat:
    def test_iid_draws(self):
        draws = np.random.default_rng(0).standard_normal((1000, 3))
        rhat, flat = gelman_rubin(draws)
        assert np.all(rhat < 1.05)
        assert not flat.any()

    def test_shifted_halves(self):
        rng = np.random.default_rng(1)
        draws = np.concatenate([rng.normal(-3.0, 1.0, 500), rng.normal(3.0, 1.0, 500)])
        rhat, _ = gelman_rubin(draws[:, None])
        assert rhat[0] > 1.5

    def test_constant_chain(self):
        rhat, flat = gelman_rubin(np.full((200, 2), 4.2))
        assert rhat.tolist() == [1.0, 1.0]
        assert flat.tolist() == [True, True]

    def test_too_short(self):
        with raises(ConfigurationError):
            gelman_rubin(np.zeros((99, 1)))


def _chain(divergences=0, n=120):
    draws = np.random.default_rng(3).standard_normal((n, 2))
    return PosteriorChain(('a', 'b'), draws, 30, n + 30, divergences, 0, 0.4, 0.8)


def test_chain_files(tmp_path):
    chain = _chain()
    chain.write_csv(tmp_path / 'chain.csv')
    names, draws = read_chain_csv(tmp_path / 'chain.csv')
    assert names == ('a', 'b')
    assert np.array_equal(draws, chain.draws)
    chain.write_summary(tmp_path / 'summary.json', truth=np.array([0.0, 10.0]))
    summary = json.loads((tmp_path / 'summary.json').read_text())
    assert summary['n_kept'] == 120
    assert summary['truth_within_2sigma'] == [True, False]
    assert len(summary['rhat']) == 2
    assert summary['upper_2sigma'][0] - summary['lower_2sigma'][0] == approx(
        4.0 * summary['std'][0]
    )


def test_divergent_share_invalidates_chain():
    assert not _chain(divergences=12).invalid
    assert _chain(divergences=13).invalid
    assert _chain(divergences=1).summary()['converged'] is False
