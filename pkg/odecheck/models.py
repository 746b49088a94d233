#  Authors: The odecheck contributors
#
#  License: 3-clause BSD, <LICENSE>
"""
Posterior models of ODE parameters: priors, likelihoods, parameter transforms, datasets, the two bundled benchmark
models (target-mediated drug disposition and Lotka-Volterra) and the loader of plugin models.
"""
import importlib.util
import logging
from functools import lru_cache

import numpy as np
import pandas as pd

try:
    from pathlib import Path
except ImportError:
    from pathlib2 import Path  # python 2

from odecheck import dual
from odecheck.dual import Dual
from odecheck.ode import OdeSystem, Ivp, SolverSpec, SolverError, SolverStats, solve
from odecheck.utils import DomainError

try:
    # noinspection PyUnresolvedReferences
    from typing import Dict, Sequence, Union, Optional, Callable
except ImportError:
    pass

logger = logging.getLogger(__name__)

TMDD = 'tmdd'
LOTKA_VOLTERRA = 'lotka-volterra'
BUILTIN_MODELS = (TMDD, LOTKA_VOLTERRA)

LINEAR = 'linear'
LOG = 'log'

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)

DATA_FOLDER = Path(__file__).parent / 'data'
LYNX_HARE_CSV = DATA_FOLDER / 'lynx_hare.csv'


class DatasetError(ValueError):
    """Raised when a dataset file does not have the structure a model expects."""
    def __init__(self, path, msg):
        self.path = path
        self.msg = msg

    def __str__(self):
        return "Invalid dataset %s: %s" % (self.path, self.msg)


class UnknownModel(ValueError):
    def __init__(self, name):
        self.name = name

    def __str__(self):
        return "Unknown model %r: should be one of %s or the path to a python plugin file" \
               % (self.name, BUILTIN_MODELS)


# ----------- priors
class LogNormalPrior(object):
    """LogNormal(mu, sigma) on a positive parameter."""
    __slots__ = ('mu', 'sigma')

    def __init__(self, mu, sigma):
        self.mu = mu
        self.sigma = sigma

    def logpdf(self, x):
        z = (dual.log(x) - self.mu) / self.sigma
        return -dual.log(x) - np.log(self.sigma) - _LOG_SQRT_2PI - 0.5 * dual.square(z)

    def __repr__(self):
        return "LogNormal(%r, %r)" % (self.mu, self.sigma)


class PositiveNormalPrior(object):
    """Normal(mu, sigma) truncated to the positive reals. The truncation constant is dropped."""
    __slots__ = ('mu', 'sigma')

    def __init__(self, mu, sigma):
        self.mu = mu
        self.sigma = sigma

    def logpdf(self, x):
        z = (x - self.mu) / self.sigma
        return -np.log(self.sigma) - _LOG_SQRT_2PI - 0.5 * dual.square(z)

    def __repr__(self):
        return "Normal+(%r, %r)" % (self.mu, self.sigma)


# ----------- parameters
class ParamLayout(object):
    """
    Names of the constrained parameters theta and their roles: ODE parameters `psi`, noise `sigma` and, for models
    whose initial state is unknown, `y0`. Every parameter is positive and is sampled on the log scale.
    """
    __slots__ = ('names', 'psi', 'sigma', 'y0')

    def __init__(self, psi_names, sigma_name='sigma', y0_names=()):
        self.names = tuple(psi_names) + (sigma_name,) + tuple(y0_names)
        n_psi = len(psi_names)
        self.psi = np.arange(n_psi)
        self.sigma = n_psi
        self.y0 = np.arange(n_psi + 1, n_psi + 1 + len(y0_names))

    @property
    def dimension(self):
        return len(self.names)

    def index(self, name):
        return self.names.index(name)


class ParamVector(object):
    """
    Constrained parameter values theta (floats or Dual) with named access and the log transform.

    >>> layout = ParamLayout(('a', 'b'))
    >>> theta = ParamVector.from_unconstrained(layout, [0.0, np.log(2.0), 0.0])
    >>> theta['a']
    1.0
    """
    __slots__ = ('layout', 'values')

    def __init__(self, layout, values):
        if not isinstance(values, Dual):
            values = np.asarray(values, dtype=float)
        if len(values) != layout.dimension:
            raise ValueError("Expected %s parameter values, found %s" % (layout.dimension, len(values)))
        self.layout = layout
        self.values = values

    @classmethod
    def from_unconstrained(cls, layout, eta):
        """theta = exp(eta)"""
        if not isinstance(eta, Dual):
            eta = np.asarray(eta, dtype=float)
        return cls(layout, dual.exp(eta))

    def unconstrained(self):
        """eta = log(theta)"""
        if np.any(dual.value(self.values) <= 0):
            raise DomainError("theta", dual.value(self.values))
        return dual.log(self.values)

    @staticmethod
    def log_abs_det_jacobian(eta):
        """log |d theta / d eta| = sum(eta) for the log transform."""
        return dual.dsum(eta)

    @property
    def psi(self):
        return self.values[self.layout.psi]

    @property
    def sigma(self):
        return self.values[self.layout.sigma]

    @property
    def y0(self):
        return self.values[self.layout.y0]

    def __getitem__(self, name):
        v = self.values[self.layout.index(name)]
        return v if isinstance(v, Dual) else float(v)

    def to_dict(self):
        return dict(zip(self.layout.names, dual.value(self.values).tolist()))


# ----------- datasets
class Dataset(object):
    """
    Observation times, an observation matrix (one row per time, one column per observable) and the metadata of the
    observables: which ODE state each column observes and whether the noise acts on the linear or on the log scale.
    """
    __slots__ = ('times', 'observations', 'columns', 'observed_states', 'scale', 'source')

    def __init__(self, times, observations, columns, observed_states, scale=LINEAR, source=None):
        times = np.asarray(times, dtype=float)
        observations = np.asarray(observations, dtype=float).reshape(len(times), len(columns))
        if scale not in (LINEAR, LOG):
            raise ValueError("scale should be %r or %r, found %r" % (LINEAR, LOG, scale))
        if len(observed_states) != len(columns):
            raise ValueError("one observed state index is required per column")
        self.times = times
        self.observations = observations
        self.columns = tuple(columns)
        self.observed_states = np.asarray(observed_states, dtype=int)
        self.scale = scale
        self.source = source

    @property
    def n_times(self):
        return len(self.times)

    @classmethod
    def read_csv(cls,
                 path,        # type: Union[str, Path]
                 observables,  # type: Dict[str, int]
                 scale=LINEAR  # type: str
                 ):
        # type: (...) -> Dataset
        """
        Reads a dataset file: a header row, a first column named `time`, and one column per observable.

        :param observables: a dictionary mapping each required column name to the index of the state it observes
        """
        try:
            df = pd.read_csv(str(path), float_precision='round_trip')
        except (IOError, OSError) as e:
            raise DatasetError(path, str(e))
        if len(df.columns) == 0 or df.columns[0] != 'time':
            raise DatasetError(path, "first column should be 'time', found %s" % list(df.columns))
        missing = [c for c in observables if c not in df.columns]
        if missing:
            raise DatasetError(path, "missing column(s) %s" % missing)
        if df[list(observables)].isnull().values.any():
            raise DatasetError(path, "missing values are not supported")
        columns = list(observables)
        return cls(df['time'].values, df[columns].values, columns, [observables[c] for c in columns],
                   scale=scale, source=str(path))

    def to_frame(self):
        df = pd.DataFrame(self.observations, columns=list(self.columns))
        df.insert(0, 'time', self.times)
        return df

    def to_csv(self, path):
        self.to_frame().to_csv(str(path), index=False)


# ----------- models
class PosteriorEvalResult(object):
    """
    Result of one evaluation of the unnormalized log posterior: `log_density` (-inf when the evaluation failed),
    `gradient` with respect to eta (None if not requested or failed), the `solution` used, the solver `stats` and a
    `failure` description.
    """
    __slots__ = ('log_density', 'gradient', 'solution', 'stats', 'failure')

    def __init__(self, log_density, gradient=None, solution=None, stats=None, failure=None):
        self.log_density = log_density
        self.gradient = gradient
        self.solution = solution
        self.stats = stats if stats is not None else SolverStats()
        self.failure = failure

    @property
    def ok(self):
        return self.failure is None

    @classmethod
    def failed(cls, reason, stats=None):
        return cls(-np.inf, stats=stats, failure=reason)


class PosteriorModel(object):
    """
    Interface of a posterior over ODE parameters. Implementations provide a `layout`, `build_ivp(theta)`,
    `log_prior(theta)`, `log_likelihood(theta, solution)` and `initial_point()`. All of them must accept Dual-valued
    parameters so that gradients can be obtained by forward differentiation.
    """
    name = None  # type: str
    layout = None  # type: ParamLayout

    @property
    def dimension(self):
        return self.layout.dimension

    @property
    def param_names(self):
        return self.layout.names

    def params(self, values):
        # type: (...) -> ParamVector
        return ParamVector(self.layout, values)

    def build_ivp(self, theta):
        raise NotImplementedError()

    def log_prior(self, theta):
        raise NotImplementedError()

    def log_likelihood(self, theta, solution):
        raise NotImplementedError()

    def initial_point(self):
        """Constrained parameter values where chains start."""
        raise NotImplementedError()


class OdePosteriorModel(PosteriorModel):
    """
    A posterior model built from declarations: the ODE system, t0, how the initial state is obtained, one prior per
    parameter, a dataset (which carries the observation metadata) and an initial point. The likelihood family follows
    the dataset scale: Normal noise on the linear scale or LogNormal noise on the log scale.

    `y0` is either a callable of psi (the initial state is then known up to psi) or None, in which case the layout
    must declare y0 parameters.
    """
    def __init__(self,
                 name,       # type: str
                 system,     # type: OdeSystem
                 layout,     # type: ParamLayout
                 priors,     # type: Dict[str, object]
                 dataset,    # type: Dataset
                 t0,         # type: float
                 initial,    # type: Dict[str, float]
                 y0=None     # type: Callable
                 ):
        missing = [n for n in layout.names if n not in priors]
        if missing:
            raise ValueError("No prior declared for %s" % missing)
        if y0 is None and len(layout.y0) != system.dimension:
            raise ValueError("Either give a y0 function or declare %s y0 parameters" % system.dimension)
        self.name = name
        self.system = system
        self.layout = layout
        self.priors = priors
        self.dataset = dataset
        self.t0 = t0
        self.initial = initial
        self._y0 = y0

    def initial_point(self):
        return np.array([self.initial[n] for n in self.layout.names], dtype=float)

    def build_ivp(self, theta):
        # type: (ParamVector) -> Ivp
        y0 = self._y0 if self._y0 is not None else theta.y0
        return Ivp(self.system, self.t0, y0, self.dataset.times, psi=theta.psi)

    def log_prior(self, theta):
        # type: (ParamVector) -> Union[float, Dual]
        values = dual.value(theta.values)
        for name, v in zip(self.layout.names, values):
            if not v > 0:
                raise DomainError(name, v)
        return sum(self.priors[n].logpdf(theta.values[i]) for i, n in enumerate(self.layout.names))

    def pointwise_log_likelihood(self, theta, solution):
        """
        Per-time-point log likelihood terms (length N). Returns None when a log-scale observable meets a non-positive
        state.
        """
        data = self.dataset
        predicted = solution.variables[:, data.observed_states]
        sigma = theta.sigma
        if data.scale == LOG:
            if np.any(dual.value(predicted) <= 0):
                return None
            obs = np.log(data.observations)
            resid = obs - dual.log(predicted)
            jac = -obs
        else:
            resid = data.observations - predicted
            jac = 0.0
        terms = jac - dual.log(sigma) - _LOG_SQRT_2PI - 0.5 * dual.square(resid / sigma)
        # sum over observables
        if isinstance(terms, Dual):
            return Dual(terms.val.sum(axis=1), terms.eps.sum(axis=1))
        return terms.sum(axis=1)

    def log_likelihood(self, theta, solution):
        terms = self.pointwise_log_likelihood(theta, solution)
        if terms is None:
            return -np.inf
        return dual.dsum(terms)


def tmdd_rhs(y, t, psi):
    """
    Target-mediated drug disposition: free ligand L, free receptor R and complex P.

        dL/dt = -k_eL L - k_on L R + k_off P
        dR/dt = k_in - k_out R - k_on L R + k_off P
        dP/dt = k_on L R - k_off P - k_eP P

    with psi = (k_on, k_off, k_in, k_out, k_eL, k_eP).
    """
    k_on, k_off, k_in, k_out, k_el, k_ep = psi[0], psi[1], psi[2], psi[3], psi[4], psi[5]
    ligand, receptor, complex_ = y[0], y[1], y[2]
    binding = k_on * ligand * receptor - k_off * complex_
    return [-k_el * ligand - binding,
            k_in - k_out * receptor - binding,
            binding - k_ep * complex_]


def lv_rhs(y, t, psi):
    """Lotka-Volterra: prey y1, predator y2, psi = (growth, predation, predator growth, predator death)."""
    interaction = y[0] * y[1]
    return [psi[0] * y[0] - psi[1] * interaction,
            psi[2] * interaction - psi[3] * y[1]]


TMDD_PSI_NAMES = ('k_on', 'k_off', 'k_in', 'k_out', 'k_eL', 'k_eP')
TMDD_TRUE_PSI = (0.592, 0.900, 2.212, 0.823, 0.201, 0.024)
TMDD_TRUE_SIGMA = 0.5
TMDD_TIMES = (0.1, 0.2, 0.4, 0.6, 0.8, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0)
TMDD_LIGAND_DOSE = 10.0
TMDD_OBSERVABLES = {'complex': 2}
REFERENCE_SPEC = SolverSpec.rk45(1e-12, 1e-12)

LV_PSI_NAMES = ('psi_1', 'psi_2', 'psi_3', 'psi_4')
LV_Y0_NAMES = ('y0_1', 'y0_2')
LV_OBSERVABLES = {'hare': 0, 'lynx': 1}


def tmdd_initial_state(psi):
    """Dose of ligand, receptor at its drug-free steady state k_in / k_out, no complex."""
    return dual.stack([TMDD_LIGAND_DOSE, psi[2] / psi[3], 0.0])


class TmddModel(OdePosteriorModel):
    """TMDD posterior: Normal noise on the complex, LogNormal priors, chains started at theta = 1."""
    def __init__(self, dataset):
        layout = ParamLayout(TMDD_PSI_NAMES)
        priors = dict(k_on=LogNormalPrior(-1, 0.3), k_off=LogNormalPrior(0, 0.3), k_in=LogNormalPrior(0, 0.3),
                      k_out=LogNormalPrior(0, 0.3), k_eL=LogNormalPrior(-1, 0.3), k_eP=LogNormalPrior(-3, 0.3),
                      sigma=LogNormalPrior(0, 0.3))
        super(TmddModel, self).__init__(TMDD, OdeSystem(tmdd_rhs, 3, name='tmdd'), layout, priors, dataset, t0=0.0,
                                        initial={n: 1.0 for n in layout.names}, y0=tmdd_initial_state)

    @classmethod
    def from_csv(cls, path):
        return cls(Dataset.read_csv(path, TMDD_OBSERVABLES, scale=LINEAR))


class LotkaVolterraModel(OdePosteriorModel):
    """
    Predator-prey posterior on the hare (prey, state 1) and lynx (predator, state 2) pelts: LogNormal noise, unknown
    initial state, chains started at unit rates, 0.1 interactions, sigma = 1 and y0 = first observation.
    """
    def __init__(self, dataset=None):
        if dataset is None:
            dataset = Dataset.read_csv(LYNX_HARE_CSV, LV_OBSERVABLES, scale=LOG)
        layout = ParamLayout(LV_PSI_NAMES, y0_names=LV_Y0_NAMES)
        # priors follow the roles in lv_rhs: psi_2 and psi_3 multiply y1 y2, psi_1 and psi_4 are per-capita rates
        rates, interactions = PositiveNormalPrior(1, 0.5), PositiveNormalPrior(0.05, 0.05)
        y0_prior = LogNormalPrior(np.log(10), 1)
        priors = dict(psi_1=rates, psi_2=interactions, psi_3=interactions, psi_4=rates,
                      sigma=LogNormalPrior(-1, 1), y0_1=y0_prior, y0_2=y0_prior)
        first = dataset.observations[0]
        initial = dict(psi_1=1.0, psi_2=0.1, psi_3=0.1, psi_4=1.0, sigma=1.0,
                       y0_1=float(first[list(dataset.observed_states).index(0)]),
                       y0_2=float(first[list(dataset.observed_states).index(1)]))
        super(LotkaVolterraModel, self).__init__(LOTKA_VOLTERRA, OdeSystem(lv_rhs, 2, name='lotka-volterra'), layout,
                                                 priors, dataset, t0=float(dataset.times[0]), initial=initial)

    @classmethod
    def from_csv(cls, path):
        return cls(Dataset.read_csv(path, LV_OBSERVABLES, scale=LOG))


# ----------- evaluation
def log_prior(model, theta):
    """Sum of the prior log densities at constrained `theta`. Raises `DomainError` if a value is not positive."""
    if not isinstance(theta, ParamVector):
        theta = model.params(theta)
    return model.log_prior(theta)


def log_likelihood(model, theta, solution):
    """Log likelihood of the model dataset given the ODE `solution` at `theta` (-inf if invalid)."""
    if not isinstance(theta, ParamVector):
        theta = model.params(theta)
    return model.log_likelihood(theta, solution)


def unnorm_log_posterior(model,               # type: PosteriorModel
                         eta,                 # type: Sequence[float]
                         spec,                # type: SolverSpec
                         want_gradient=False  # type: bool
                         ):
    # type: (...) -> PosteriorEvalResult
    """
    Evaluates log p(D | theta) + log p(theta) + log |d theta / d eta| with the ODE solved by `spec`, at unconstrained
    point `eta`. With `want_gradient`, the whole computation runs over duals seeded on eta: the solve is then the
    forward sensitivity solve and the gradient comes out of the chain rule.

    Solver failures, domain errors and invalid likelihoods never raise: they produce a -inf log density and a
    `failure` message.
    """
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        return PosteriorEvalResult.failed("non-finite eta")
    x = Dual.seed(eta) if want_gradient else eta
    theta = ParamVector.from_unconstrained(model.layout, x)
    try:
        lp = model.log_prior(theta)
    except DomainError as e:
        return PosteriorEvalResult.failed(str(e))
    try:
        solution = solve(model.build_ivp(theta), spec)
    except SolverError as e:
        return PosteriorEvalResult.failed(str(e), stats=e.stats)
    ll = model.log_likelihood(theta, solution)
    if not np.isfinite(dual.value(ll)):
        return PosteriorEvalResult.failed("likelihood-invalid (non-positive state)", stats=solution.stats)
    total = lp + ll + ParamVector.log_abs_det_jacobian(x)
    log_density = float(dual.value(total))
    gradient = np.array(total.eps) if isinstance(total, Dual) else None
    if not np.isfinite(log_density) or (gradient is not None and not np.all(np.isfinite(gradient))):
        return PosteriorEvalResult.failed("non-finite log density", stats=solution.stats)
    # only keep float states, the tangents were only needed for the gradient
    solution.sensitivities = None
    return PosteriorEvalResult(log_density, gradient, solution, solution.stats)


# ----------- simulation
@lru_cache(maxsize=8)
def _tmdd_reference_complex(times, psi):
    system = OdeSystem(tmdd_rhs, 3, name='tmdd')
    ivp = Ivp(system, 0.0, tmdd_initial_state, times, psi=psi)
    return solve(ivp, REFERENCE_SPEC).states[:, 2]


def simulate_tmdd_data(seed,                    # type: int
                       sigma=TMDD_TRUE_SIGMA,   # type: float
                       psi=TMDD_TRUE_PSI,       # type: Sequence[float]
                       times=TMDD_TIMES         # type: Sequence[float]
                       ):
    # type: (...) -> Dataset
    """
    Simulates a TMDD dataset: the complex is computed with the reference solver (`rk45(1e-12)`) and observed with
    additive Normal(0, sigma^2) noise drawn from a generator seeded with `seed`.
    """
    clean = _tmdd_reference_complex(tuple(float(t) for t in times), tuple(float(p) for p in psi))
    noise = np.random.default_rng(seed).normal(0.0, 1.0, size=len(clean)) * sigma
    return Dataset(times, clean + noise, ['complex'], [2], scale=LINEAR, source='simulated(seed=%s)' % seed)


# ----------- loading
def load_model(name,          # type: str
               dataset=None   # type: Union[str, Path, None]
               ):
    # type: (...) -> PosteriorModel
    """
    Returns the model named `name` with its dataset.

     - 'tmdd' requires a `dataset` path.
     - 'lotka-volterra' uses the bundled 1900-1920 pelts table unless `dataset` is given.
     - any other name is treated as the path to a python file defining `make_model(dataset)` which returns a
       `PosteriorModel` (`dataset` is passed as given, possibly None).
    """
    if name == TMDD:
        if dataset is None:
            raise ValueError("model 'tmdd' needs a dataset path (key 'dataset')")
        return TmddModel.from_csv(dataset)
    if name == LOTKA_VOLTERRA:
        return LotkaVolterraModel() if dataset is None else LotkaVolterraModel.from_csv(dataset)

    path = Path(name)
    if path.suffix != '.py' or not path.exists():
        raise UnknownModel(name)
    spec = importlib.util.spec_from_file_location("odecheck_plugin_%s" % path.stem, str(path))
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    try:
        make_model = module.make_model
    except AttributeError:
        raise UnknownModel(name)
    model = make_model(dataset)
    if not isinstance(model, PosteriorModel):
        raise TypeError("make_model in %s should return a PosteriorModel, found %r" % (name, type(model)))
    logger.info("Loaded plugin model %r from %s", model.name, path)
    return model
