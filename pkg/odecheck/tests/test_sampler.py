import numpy as np
import pytest
from scipy import stats

from odecheck import SamplerConfig, Draws, InitializationFailure, DegenerateChains, SolverSpec, run_nuts, leapfrog, \
    convergence_summary, nuts_sample, unnorm_log_posterior, compute_log_ratios
from odecheck import sampler
from odecheck.sampler import STAT_COLUMNS, rhat_rank, ess_bulk, ess_tail

from .ref_draws import GaussianTarget, FailingTarget, decay_model


def gaussian_gradient(q):
    return -q


def energy(q, p):
    return 0.5 * float(np.dot(q, q) + np.dot(p, p))


def test_leapfrog_energy_error_is_second_order():
    """Over a fixed integration time, halving the step size quarters the energy error"""
    def energy_error(eps):
        q, p = np.array([1.0]), np.array([0.0])
        h0 = energy(q, p)
        for _ in range(int(round(1.0 / eps))):
            q, p = leapfrog(q, p, eps, gaussian_gradient)
        return abs(energy(q, p) - h0)

    ratio = energy_error(0.1) / energy_error(0.05)
    assert 3.5 <= ratio <= 4.5


def test_leapfrog_zero_gradient():
    q, p = leapfrog(np.array([1.0, 2.0]), np.array([0.5, -1.0]), 0.2, lambda q: np.zeros(2))
    np.testing.assert_allclose(q, [1.1, 1.8])
    np.testing.assert_array_equal(p, [0.5, -1.0])


def test_leapfrog_is_reversible():
    q0, p0 = np.array([0.3, -1.2]), np.array([0.7, 0.1])
    q1, p1 = leapfrog(q0, p0, 0.25, gaussian_gradient, inv_metric=np.array([1.0, 2.0]))
    q2, p2 = leapfrog(q1, -p1, 0.25, gaussian_gradient, inv_metric=np.array([1.0, 2.0]))
    np.testing.assert_allclose(q2, q0, atol=1e-14)
    np.testing.assert_allclose(-p2, p0, atol=1e-14)


def test_leapfrog_non_finite_gradient():
    q, p = leapfrog(np.array([1.0]), np.array([1.0]), 0.1, lambda q: None if q[0] > 1 else -q)
    assert np.isnan(p).all()


def test_sampler_config_validation():
    cfg = SamplerConfig(iterations=100)
    assert cfg.warmup == 50 and cfg.n_draws == 50
    for kwargs in (dict(iterations=10, warmup=10), dict(target_accept=1.0), dict(chains=0), dict(stepsize=0.0),
                   dict(max_depth=0)):
        with pytest.raises(ValueError):
            SamplerConfig(**kwargs)


@pytest.fixture(scope="module")
def gaussian_draws():
    config = SamplerConfig(chains=2, iterations=1000, warmup=500, seed=3)
    return run_nuts(GaussianTarget(2), config, method=SolverSpec.rk4(1))


def test_gaussian_target_moments(gaussian_draws):
    """NUTS recovers the moments of a standard 2-D Gaussian"""
    draws, diagnostics = gaussian_draws
    assert draws.eta.shape == (2, 500, 2)
    x = draws.flat_theta()
    np.testing.assert_array_less(np.abs(x.mean(axis=0)), 0.2)
    cov = np.cov(x.T)
    np.testing.assert_allclose(np.diag(cov), [1.0, 1.0], atol=0.3)
    assert abs(cov[0, 1]) < 0.2

    assert set(draws.stats) == set(STAT_COLUMNS)
    assert diagnostics.divergence_fraction == 0
    assert all(0.5 < a <= 1.0 for a in diagnostics.accept_stat)
    assert all(d <= 10 for d in diagnostics.treedepth)
    assert draws.rhs_evals == 0


def test_gaussian_target_convergence(gaussian_draws):
    draws, _ = gaussian_draws
    summary = convergence_summary(draws)
    assert summary.names == ('x0', 'x1')
    assert summary.max_rhat < 1.05
    assert summary.min_ess_bulk > 100
    df = summary.to_frame()
    assert list(df.columns) == ['parameter', 'mean', 'sd', 'mcse_mean', 'rhat', 'ess_bulk', 'ess_tail']
    assert (np.abs(summary.mean) < 4 * summary.mcse_mean + 0.05).all()


def test_seeding_is_reproducible():
    """Same seed, same draws, whatever the number of threads. Chains use distinct streams"""
    config = SamplerConfig(chains=2, iterations=60, warmup=30, seed=11)
    a, _ = run_nuts(GaussianTarget(2), config)
    config.threads = 2
    b, _ = run_nuts(GaussianTarget(2), config)
    np.testing.assert_array_equal(a.eta, b.eta)
    np.testing.assert_array_equal(a.lp, b.lp)
    assert not np.array_equal(a.eta[0], a.eta[1])

    config.seed = 12
    c, _ = run_nuts(GaussianTarget(2), config)
    assert not np.array_equal(a.eta, c.eta)


def test_initialization_failure():
    config = SamplerConfig(chains=1, iterations=10, init_retries=3)
    with pytest.raises(InitializationFailure) as exc_info:
        run_nuts(FailingTarget(2), config)
    assert exc_info.value.retries == 3
    assert "always failing" in str(exc_info.value)


def test_draws_save_load(tmp_path):
    rng = np.random.default_rng(0)
    eta = rng.standard_normal((2, 5, 3))
    stats = {col: rng.uniform(size=(2, 5)) for col in STAT_COLUMNS}
    stats['divergent'] = np.zeros((2, 5))
    draws = Draws(('a', 'b', 'c'), eta, rng.standard_normal((2, 5)), states=rng.standard_normal((2, 5, 4, 2)),
                  stats=stats, method=SolverSpec.rk45(1e-3), rhs_evals=123, meta=dict(model='lotka-volterra'))
    draws.save(tmp_path)

    header = (tmp_path / "chain_1.csv").read_text().splitlines()[0]
    assert header == "chain,iter,a,b,c,lp__,accept_stat,stepsize,treedepth,n_leapfrog,divergent"
    assert (tmp_path / "chain_2.csv").exists()

    loaded = Draws.load(tmp_path)
    np.testing.assert_array_equal(loaded.eta, draws.eta)
    np.testing.assert_array_equal(loaded.lp, draws.lp)
    np.testing.assert_array_equal(loaded.states, draws.states)
    assert loaded.method == SolverSpec.rk45(1e-3)
    assert loaded.param_names == ('a', 'b', 'c')
    assert loaded.rhs_evals == 123
    assert loaded.meta == dict(model='lotka-volterra')
    assert loaded.gradient_mode
    np.testing.assert_allclose(loaded.flat_theta(), np.exp(eta).reshape(-1, 3))

    frame = draws.to_frame(1)
    assert frame['chain'].unique().tolist() == [2]
    assert frame['iter'].tolist() == [1, 2, 3, 4, 5]


def test_draws_shape_validation():
    with pytest.raises(ValueError):
        Draws(('a',), np.zeros((2, 5, 2)), np.zeros((2, 5)))


def test_convergence_of_iid_chains():
    """4 chains of 1000 iid normals: R-hat close to 1 and ESS close to the number of draws"""
    x = np.random.default_rng(1).standard_normal((4, 1000))
    assert 0.999 <= rhat_rank(x) <= 1.01
    assert 0.7 * 4000 <= ess_bulk(x) <= 1.3 * 4000
    assert ess_tail(x) > 0.5 * 4000


def test_shifted_chain_is_detected():
    x = np.random.default_rng(2).standard_normal((4, 500))
    x[0] += 3.0
    assert rhat_rank(x) > 1.1


def test_autocorrelated_chains_have_lower_ess():
    rng = np.random.default_rng(5)
    x = np.empty((4, 1000))
    x[:, 0] = rng.standard_normal(4)
    for t in range(1, 1000):
        x[:, t] = 0.9 * x[:, t - 1] + np.sqrt(1 - 0.81) * rng.standard_normal(4)
    # AR(1) with rho = 0.9: ESS ~ S (1 - rho) / (1 + rho)
    assert 4000 * 0.02 < ess_bulk(x) < 4000 * 0.12


def test_convergence_summary_errors():
    x = np.random.default_rng(0).standard_normal((2, 50, 2))
    x[:, :, 1] = 1.0
    with pytest.raises(DegenerateChains) as exc_info:
        convergence_summary(x, names=['a', 'b'])
    assert exc_info.value.names == ['b']

    with pytest.raises(ValueError):
        convergence_summary(np.zeros((2, 3, 1)))

    with pytest.warns(UserWarning):
        convergence_summary(np.random.default_rng(0).standard_normal((1, 200)))


class CountingTarget(GaussianTarget):
    """A standard normal target that counts its density evaluations."""
    def __init__(self, dimension=2):
        super(CountingTarget, self).__init__(dimension)
        self.n_evaluations = 0

    def evaluate(self, eta):
        self.n_evaluations += 1
        return super(CountingTarget, self).evaluate(eta)


def test_trajectories_use_the_public_leapfrog(monkeypatch):
    """Every trajectory step goes through `leapfrog` and costs exactly one density evaluation"""
    calls = []

    def counting_leapfrog(*args, **kwargs):
        calls.append(1)
        return leapfrog(*args, **kwargs)

    monkeypatch.setattr(sampler, 'leapfrog', counting_leapfrog)
    target = CountingTarget(2)
    draws, _ = run_nuts(target, SamplerConfig(chains=1, iterations=40, warmup=20, seed=2))
    n_sampling = int(draws.stats['n_leapfrog'].sum())
    assert n_sampling > 0
    assert len(calls) >= n_sampling
    assert target.n_evaluations == 1 + len(calls)


def test_draws_are_uniform_under_the_target_cdf(gaussian_draws):
    """The probability integral transform of the draws of each coordinate is close to uniform"""
    draws, _ = gaussian_draws
    u = stats.norm.cdf(draws.flat_theta())
    for j in range(u.shape[1]):
        counts, _ = np.histogram(u[:, j], bins=10, range=(0.0, 1.0))
        assert stats.chisquare(counts).pvalue > 0.001


def test_divergences_grow_with_the_step_size(gaussian_draws):
    """A fixed step size ten times the adapted one makes the leapfrog unstable and most transitions diverge"""
    _, adapted = gaussian_draws
    big = 10 * float(np.mean(adapted.stepsize))
    assert big > 2.0
    config = SamplerConfig(chains=2, iterations=100, warmup=0, stepsize=big, seed=3, adapt=False)
    draws, diagnostics = run_nuts(GaussianTarget(2), config)
    assert diagnostics.stepsize == [big, big]
    np.testing.assert_array_equal(draws.stats['stepsize'], big)
    assert diagnostics.divergence_fraction > adapted.divergence_fraction
    assert diagnostics.divergence_fraction > 0.5


def test_without_adaptation_the_step_size_is_kept():
    config = SamplerConfig(chains=1, iterations=30, warmup=10, stepsize=0.3, seed=1, adapt=False)
    draws, diagnostics = run_nuts(GaussianTarget(2), config)
    assert draws.eta.shape == (1, 20, 2)
    assert diagnostics.stepsize == [0.3]


def test_rhs_evaluations_are_accounted():
    """Without adaptation, the work is one evaluation at the initial point plus one per leapfrog step"""
    model = decay_model()
    spec = SolverSpec.rk4(2)
    cost = unnorm_log_posterior(model, np.log(model.initial_point()), spec, want_gradient=True).stats.rhs_evals
    assert cost > 0
    config = SamplerConfig(chains=1, iterations=20, warmup=0, stepsize=0.05, seed=8, adapt=False)
    draws, diagnostics = nuts_sample(model, spec, config)
    n_leapfrog = int(draws.stats['n_leapfrog'].sum())
    assert draws.rhs_evals == cost * (1 + n_leapfrog)
    assert diagnostics.total_rhs_evals == draws.rhs_evals


@pytest.fixture(scope="module")
def decay_draws():
    model = decay_model()
    spec = SolverSpec.rk4(2)
    draws, diagnostics = nuts_sample(model, spec, SamplerConfig(chains=2, iterations=100, seed=4))
    return model, spec, draws, diagnostics


def test_ode_draws_store_the_sampling_density(decay_draws):
    """Stored log densities and states are exactly those of a fresh evaluation with the sampling method"""
    model, spec, draws, _ = decay_draws
    assert draws.eta.shape == (2, 50, 2)
    assert draws.states.shape == (2, 50, 5, 1)
    assert draws.method == spec
    assert draws.meta['model'] == 'decay'
    for c in range(2):
        for s in range(50):
            res = unnorm_log_posterior(model, draws.eta[c, s], spec, want_gradient=True)
            assert res.log_density == draws.lp[c, s]
            np.testing.assert_array_equal(res.solution.states, draws.states[c, s])


def test_ode_draws_have_zero_log_ratios_under_their_method(decay_draws):
    model, spec, draws, _ = decay_draws
    ratios = compute_log_ratios(draws, model, spec)
    np.testing.assert_array_equal(ratios.log_ratios, np.zeros(100))
