import numpy as np
import pytest
from scipy import integrate, stats

from odecheck import Dataset, DatasetError, UnknownModel, TmddModel, LotkaVolterraModel, SolverSpec, SolverStats, \
    OdeSolution, load_model, log_prior, log_likelihood, unnorm_log_posterior, simulate_tmdd_data, ParamVector, \
    ParamLayout, Ivp, OdeSystem, solve
from odecheck.models import tmdd_rhs, lv_rhs, tmdd_initial_state, TMDD_TRUE_PSI, TMDD_TIMES, REFERENCE_SPEC, \
    LV_PSI_NAMES
from odecheck.utils import DomainError

from .ref_draws import decay_model


@pytest.fixture(scope="module")
def tmdd_model():
    return TmddModel(simulate_tmdd_data(1))


@pytest.fixture(scope="module")
def lv_model():
    return LotkaVolterraModel()


def test_tmdd_rhs():
    psi = TMDD_TRUE_PSI
    steady = tmdd_rhs([0.0, psi[2] / psi[3], 0.0], 0.0, psi)
    np.testing.assert_allclose(steady, [0.0, 0.0, 0.0], atol=1e-15)

    d = tmdd_rhs([10.0, psi[2] / psi[3], 0.0], 0.0, psi)
    assert d[0] == pytest.approx(-17.92, abs=0.01)

    assert tmdd_rhs([1.0, 1.0, 1.0], 0.0, [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]) == [0.0, 1.0, 0.0]


def test_lv_rhs():
    assert lv_rhs([2.0, 3.0], 0.0, [1.0, 1.0, 1.0, 1.0]) == [-4.0, 3.0]
    psi = [0.55, 0.028, 0.024, 0.80]
    np.testing.assert_allclose(lv_rhs([psi[3] / psi[2], psi[0] / psi[1]], 0.0, psi), [0.0, 0.0], atol=1e-12)
    assert lv_rhs([1.0, 1.0], 0.0, psi) == [psi[0] - psi[1], psi[2] - psi[3]]


def test_tmdd_log_prior_oracle(tmdd_model):
    """Prior log densities agree with scipy at 5 random points"""
    mus = (-1, 0, 0, 0, -1, -3, 0)
    rng = np.random.default_rng(3)
    for _ in range(5):
        theta = rng.lognormal(0.0, 0.5, size=7)
        expected = sum(stats.lognorm(s=0.3, scale=np.exp(mu)).logpdf(x) for mu, x in zip(mus, theta))
        assert log_prior(tmdd_model, theta) == pytest.approx(expected, rel=1e-10)


def test_tmdd_log_prior_at_median(tmdd_model):
    theta = np.ones(7)
    theta[0] = np.exp(-1)
    others = sum(stats.lognorm(s=0.3, scale=np.exp(mu)).logpdf(1.0) for mu in (0, 0, 0, -1, -3, 0))
    k_on_term = -np.log(np.exp(-1)) - np.log(0.3 * np.sqrt(2 * np.pi))
    assert log_prior(tmdd_model, theta) == pytest.approx(others + k_on_term, rel=1e-10)


def test_lv_log_prior_oracle(lv_model):
    rng = np.random.default_rng(4)
    for _ in range(5):
        theta = rng.lognormal(0.0, 0.5, size=7)
        psi, sigma, y0 = theta[:4], theta[4], theta[5:]
        expected = (stats.norm(1, 0.5).logpdf(psi[0]) + stats.norm(0.05, 0.05).logpdf(psi[1])
                    + stats.norm(0.05, 0.05).logpdf(psi[2]) + stats.norm(1, 0.5).logpdf(psi[3])
                    + stats.lognorm(s=1, scale=np.exp(-1)).logpdf(sigma)
                    + sum(stats.lognorm(s=1, scale=10).logpdf(v) for v in y0))
        assert log_prior(lv_model, theta) == pytest.approx(expected, rel=1e-10)


def test_lv_log_prior_domain(lv_model):
    theta = lv_model.initial_point()
    theta[1] = -0.1
    with pytest.raises(DomainError):
        log_prior(lv_model, theta)


def test_tmdd_log_likelihood_zero_residuals():
    obs = np.linspace(1.0, 2.0, 15)
    model = TmddModel(Dataset(TMDD_TIMES, obs, ['complex'], [2]))
    states = np.zeros((15, 3))
    states[:, 2] = obs
    sol = OdeSolution(np.array(TMDD_TIMES), states, SolverStats())
    theta = np.ones(7)
    theta[6] = 0.5
    ll = log_likelihood(model, theta, sol)
    assert ll == pytest.approx(15 * -np.log(0.5 * np.sqrt(2 * np.pi)))
    theta[6] = 1.0
    assert ll - log_likelihood(model, theta, sol) == pytest.approx(15 * np.log(2))


def test_lv_log_likelihood_non_positive_state(lv_model):
    states = np.ones((lv_model.dataset.n_times, 2))
    states[3, 1] = -1.0
    sol = OdeSolution(lv_model.dataset.times, states, SolverStats())
    assert log_likelihood(lv_model, lv_model.initial_point(), sol) == -np.inf


@pytest.mark.parametrize("n", [0, 7, 20], ids=str)
def test_lv_pointwise_log_likelihood_is_local(lv_model, n):
    """Perturbing the state at output time n only changes the n-th likelihood term"""
    theta = lv_model.params(lv_model.initial_point())
    sol = unnorm_log_posterior(lv_model, np.log(lv_model.initial_point()), SolverSpec.rk45(1e-6)).solution
    states = sol.states.copy()
    states[n] *= 1.1
    before = lv_model.pointwise_log_likelihood(theta, sol)
    after = lv_model.pointwise_log_likelihood(theta, OdeSolution(sol.times, states, SolverStats()))
    changed = np.flatnonzero(before != after)
    assert changed.tolist() == [n]


def test_lv_initial_point(lv_model):
    """The documented initialization evaluates to a finite density with the bundled dataset"""
    assert lv_model.param_names == LV_PSI_NAMES + ('sigma', 'y0_1', 'y0_2')
    theta = ParamVector(lv_model.layout, lv_model.initial_point())
    assert theta.to_dict() == dict(psi_1=1.0, psi_2=0.1, psi_3=0.1, psi_4=1.0, sigma=1.0, y0_1=30.0, y0_2=4.0)
    res = unnorm_log_posterior(lv_model, np.log(lv_model.initial_point()), SolverSpec.rk45(1e-3))
    assert res.ok and np.isfinite(res.log_density)
    assert res.gradient is None
    assert res.solution.states.shape == (21, 2)


def test_lv_priors(lv_model):
    """Per-capita rates get Normal+(1, 0.5), the two interaction terms of lv_rhs get Normal+(0.05, 0.05)"""
    priors = {n: (type(p).__name__, p.mu, p.sigma) for n, p in lv_model.priors.items()}
    assert priors == dict(psi_1=('PositiveNormalPrior', 1, 0.5),
                          psi_2=('PositiveNormalPrior', 0.05, 0.05),
                          psi_3=('PositiveNormalPrior', 0.05, 0.05),
                          psi_4=('PositiveNormalPrior', 1, 0.5),
                          sigma=('LogNormalPrior', -1, 1),
                          y0_1=('LogNormalPrior', np.log(10), 1),
                          y0_2=('LogNormalPrior', np.log(10), 1))

    # a typical posterior point is far more likely than the one with the two last rates exchanged
    typical = dict(psi_1=0.55, psi_2=0.028, psi_3=0.024, psi_4=0.80, sigma=0.25, y0_1=30.0, y0_2=4.0)
    exchanged = dict(typical, psi_3=0.80, psi_4=0.024)
    order = lv_model.param_names
    assert log_prior(lv_model, np.array([typical[n] for n in order])) \
        > log_prior(lv_model, np.array([exchanged[n] for n in order])) + 50


def _check_gradient(model, eta, spec):
    res = unnorm_log_posterior(model, eta, spec, want_gradient=True)
    assert res.ok, res.failure
    delta = 1e-6
    fd = np.empty_like(eta)
    for j in range(len(eta)):
        step = np.zeros_like(eta)
        step[j] = delta
        plus = unnorm_log_posterior(model, eta + step, spec).log_density
        minus = unnorm_log_posterior(model, eta - step, spec).log_density
        fd[j] = (plus - minus) / (2 * delta)
    np.testing.assert_allclose(res.gradient, fd, rtol=1e-5, atol=1e-5)
    assert res.log_density == pytest.approx(unnorm_log_posterior(model, eta, spec).log_density, rel=1e-12)


def test_tmdd_gradient(tmdd_model):
    """Gradient at theta = 1 against central finite differences, RK4 with 20 steps"""
    _check_gradient(tmdd_model, np.zeros(7), SolverSpec.rk4(20))


def test_lv_gradient(lv_model):
    _check_gradient(lv_model, np.log(lv_model.initial_point()), SolverSpec.rk4(20))


def test_unconstrained_density_integrates_like_the_constrained_one():
    """
    Along a slice with sigma fixed, the unconstrained density (jacobian included) integrates over eta to sigma times
    the integral of prior x likelihood over the constrained rate
    """
    model = decay_model()
    spec = SolverSpec.rk4(20)
    sigma = 0.1
    offset = unnorm_log_posterior(model, [0.0, np.log(sigma)], spec).log_density

    def eta_density(e):
        return np.exp(unnorm_log_posterior(model, [e, np.log(sigma)], spec).log_density - offset)

    def theta_density(k):
        theta = np.array([k, sigma])
        solution = unnorm_log_posterior(model, np.log(theta), spec).solution
        return np.exp(log_prior(model, theta) + log_likelihood(model, theta, solution) - offset)

    eta_integral, _ = integrate.quad(eta_density, np.log(1e-3), np.log(5.0), points=[0.0], limit=200)
    theta_integral, _ = integrate.quad(theta_density, 1e-3, 5.0, points=[1.0], limit=200)
    assert eta_integral == pytest.approx(sigma * theta_integral, rel=1e-5)


def test_posterior_is_deterministic(lv_model):
    eta = np.log(lv_model.initial_point())
    spec = SolverSpec.rk45(1e-4)
    a = unnorm_log_posterior(lv_model, eta, spec, want_gradient=True)
    b = unnorm_log_posterior(lv_model, eta, spec, want_gradient=True)
    assert a.log_density == b.log_density
    np.testing.assert_array_equal(a.gradient, b.gradient)


def test_posterior_failures_do_not_raise(lv_model):
    eta = np.log(lv_model.initial_point())
    res = unnorm_log_posterior(lv_model, eta, SolverSpec.rk45(1e-12, max_steps=1))
    assert not res.ok and res.log_density == -np.inf
    assert "Maximum number of steps" in res.failure

    res = unnorm_log_posterior(lv_model, eta + np.nan, SolverSpec.rk4(2))
    assert not res.ok


def test_param_vector_transform():
    layout = ParamLayout(('a', 'b'))
    theta = ParamVector.from_unconstrained(layout, [0.0, np.log(2.0), np.log(3.0)])
    assert theta['b'] == pytest.approx(2.0)
    assert theta.sigma == pytest.approx(3.0)
    np.testing.assert_allclose(theta.unconstrained(), [0.0, np.log(2.0), np.log(3.0)])
    assert ParamVector.log_abs_det_jacobian(np.array([0.5, 1.0, -2.0])) == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        ParamVector(layout, [1.0, 2.0])


def test_simulate_tmdd_data():
    a, b = simulate_tmdd_data(7), simulate_tmdd_data(7)
    assert a.n_times == 15
    assert a.columns == ('complex',)
    np.testing.assert_array_equal(a.observations, b.observations)
    assert not np.array_equal(a.observations, simulate_tmdd_data(8).observations)


def test_simulate_tmdd_data_noise_free():
    clean = simulate_tmdd_data(1, sigma=0.0)
    ivp = Ivp(OdeSystem(tmdd_rhs, 3), 0.0, tmdd_initial_state, TMDD_TIMES, psi=TMDD_TRUE_PSI)
    np.testing.assert_array_equal(clean.observations[:, 0], solve(ivp, REFERENCE_SPEC).states[:, 2])


def test_dataset_csv(tmp_path):
    path = tmp_path / "tmdd.csv"
    data = simulate_tmdd_data(2)
    data.to_csv(path)
    assert path.read_text().splitlines()[0] == "time,complex"

    model = TmddModel.from_csv(path)
    np.testing.assert_array_equal(model.dataset.observations, data.observations)
    np.testing.assert_array_equal(model.dataset.times, data.times)


def test_dataset_errors(tmp_path):
    with pytest.raises(DatasetError):
        TmddModel.from_csv(tmp_path / "missing.csv")

    path = tmp_path / "wrong.csv"
    path.write_text("time,other\n0.1,1.0\n")
    with pytest.raises(DatasetError) as exc_info:
        TmddModel.from_csv(path)
    assert "complex" in str(exc_info.value)

    path.write_text("t,complex\n0.1,1.0\n")
    with pytest.raises(DatasetError):
        TmddModel.from_csv(path)


def test_load_model(tmp_path):
    assert load_model('lotka-volterra').name == 'lotka-volterra'
    with pytest.raises(ValueError):
        load_model('tmdd')
    with pytest.raises(UnknownModel):
        load_model('sir')

    plugin = tmp_path / "my_model.py"
    plugin.write_text("from odecheck.models import LotkaVolterraModel\n\n\n"
                      "def make_model(dataset):\n"
                      "    return LotkaVolterraModel()\n")
    assert isinstance(load_model(str(plugin)), LotkaVolterraModel)
