#  Authors: The odecheck contributors
#
#  License: 3-clause BSD, <LICENSE>
"""
Dynamic Hamiltonian Monte Carlo (multinomial No-U-Turn sampler) with windowed warmup adaptation, multi-chain
execution, draws persistence and the rank-normalized convergence diagnostics (split R-hat, bulk and tail ESS).
"""
import json
import logging
import time
import warnings

import numpy as np
import pandas as pd
from scipy.fft import next_fast_len
from scipy.special import ndtri
from scipy.stats import rankdata

try:
    from pathlib import Path
except ImportError:
    from pathlib2 import Path  # python 2

from odecheck.models import unnorm_log_posterior, PosteriorModel
from odecheck.ode import SolverSpec
from odecheck.utils import chain_rng, parallel_map

try:
    # noinspection PyUnresolvedReferences
    from typing import Sequence, Optional, Union, List, Tuple
except ImportError:
    pass

logger = logging.getLogger(__name__)

DRAWS_NPZ = 'draws.npz'
RUN_JSON = 'run.json'
CHAIN_CSV = 'chain_%d.csv'
STAT_COLUMNS = ('accept_stat', 'stepsize', 'treedepth', 'n_leapfrog', 'divergent')

LOG_TRANSFORM = 'log'
IDENTITY_TRANSFORM = 'identity'


class InitializationFailure(Exception):
    """Raised when no finite log density could be found around the initial point of a chain."""
    def __init__(self, chain, retries, reason):
        self.chain = chain
        self.retries = retries
        self.reason = reason

    def __str__(self):
        return "Chain %s could not be initialized after %s jittered retries. Last failure: %s" \
               % (self.chain, self.retries, self.reason)


class DegenerateChains(ValueError):
    """Raised when a parameter is constant across all draws (diagnostics are undefined)."""
    def __init__(self, names):
        self.names = names

    def __str__(self):
        return "Parameter(s) %s are constant across all draws" % (self.names,)


class SamplerConfig(object):
    """
    Settings of `nuts_sample`. `warmup=None` means half of the iterations. Other defaults follow the widely used
    dynamic HMC defaults: 4 chains of 4000 iterations, initial step size 0.1, target acceptance 0.8, max depth 10.
    With `adapt=False` the warmup iterations are only discarded: the step size stays `stepsize` and the metric the
    identity.
    """
    def __init__(self,
                 chains=4,               # type: int
                 iterations=4000,        # type: int
                 warmup=None,            # type: Optional[int]
                 stepsize=0.1,           # type: float
                 target_accept=0.8,      # type: float
                 max_depth=10,           # type: int
                 seed=1,                 # type: int
                 max_energy_error=1000.,  # type: float
                 init_retries=100,       # type: int
                 threads=1,              # type: int
                 progress=False,         # type: bool
                 adapt=True              # type: bool
                 ):
        if warmup is None:
            warmup = iterations // 2
        if chains < 1 or iterations < 1:
            raise ValueError("chains and iterations should be positive")
        if not 0 <= warmup < iterations:
            raise ValueError("warmup should be in [0, iterations), found %r for %r iterations" % (warmup, iterations))
        if not 0 < target_accept < 1:
            raise ValueError("target_accept should be in (0, 1), found %r" % target_accept)
        if not stepsize > 0 or max_depth < 1:
            raise ValueError("stepsize should be positive and max_depth >= 1")
        self.chains = chains
        self.iterations = iterations
        self.warmup = warmup
        self.stepsize = stepsize
        self.target_accept = target_accept
        self.max_depth = max_depth
        self.seed = seed
        self.max_energy_error = max_energy_error
        self.init_retries = init_retries
        self.threads = threads
        self.progress = progress
        self.adapt = adapt

    @property
    def n_draws(self):
        """Number of post-warmup draws per chain."""
        return self.iterations - self.warmup


class PosteriorTarget(object):
    """Sampling target: a posterior model on the unconstrained scale with the ODE solved by `spec`."""
    transform = LOG_TRANSFORM

    def __init__(self, model, spec):
        self.model = model
        self.spec = spec

    @property
    def dimension(self):
        return self.model.dimension

    @property
    def param_names(self):
        return self.model.param_names

    def initial_point(self):
        return np.log(self.model.initial_point())

    def evaluate(self, eta):
        return unnorm_log_posterior(self.model, eta, self.spec, want_gradient=True)


# ----------- integrator
def _kinetic(p, inv_metric):
    return 0.5 * np.dot(p, inv_metric * p)


def leapfrog(eta,             # type: np.ndarray
             momentum,        # type: np.ndarray
             step_size,       # type: float
             gradient_fn,     # type: callable
             inv_metric=None,  # type: np.ndarray
             gradient=None     # type: np.ndarray
             ):
    """
    One leapfrog step (half momentum kick, full position drift, half kick) with the diagonal inverse mass matrix
    `inv_metric` (identity by default). `gradient_fn(eta)` returns the gradient of the log density, or None where it
    cannot be evaluated: the returned momentum is then NaN, which callers treat as a divergence. `gradient` is the
    gradient at `eta` when it is already known, and saves one evaluation.

    :return: a tuple (eta', momentum')
    """
    eta = np.asarray(eta, dtype=float)
    inv_metric = np.ones_like(eta) if inv_metric is None else inv_metric
    p = momentum + 0.5 * step_size * (gradient_fn(eta) if gradient is None else gradient)
    q = eta + step_size * inv_metric * p
    g = gradient_fn(q)
    if g is None or not np.all(np.isfinite(g)):
        return q, np.full_like(p, np.nan)
    return q, p + 0.5 * step_size * g


class _Point(object):
    """A phase space point with its cached log density, gradient and payload (the ODE states)."""
    __slots__ = ('q', 'p', 'lp', 'grad', 'payload')

    def __init__(self, q, p, lp, grad, payload):
        self.q = q
        self.p = p
        self.lp = lp
        self.grad = grad
        self.payload = payload


class _Tree(object):
    __slots__ = ('left', 'right', 'sample', 'log_weight', 'rho', 'n_leapfrog', 'sum_accept', 'divergent', 'valid')

    def __init__(self, left, right, sample, log_weight, rho, n_leapfrog, sum_accept, divergent, valid):
        self.left = left
        self.right = right
        self.sample = sample
        self.log_weight = log_weight
        self.rho = rho
        self.n_leapfrog = n_leapfrog
        self.sum_accept = sum_accept
        self.divergent = divergent
        self.valid = valid


# ----------- adaptation
class _StepSizeAdaptation(object):
    """Dual averaging of the log step size toward a target acceptance statistic."""
    def __init__(self, delta, gamma=0.05, kappa=0.75, t0=10.0):
        self.delta = delta
        self.gamma = gamma
        self.kappa = kappa
        self.t0 = t0
        self.mu = 0.0
        self.restart()

    def restart(self):
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def learn_stepsize(self, adapt_stat):
        self.counter += 1
        adapt_stat = min(1.0, adapt_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - adapt_stat)
        x = self.mu - self.s_bar * np.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return np.exp(x)

    def final_stepsize(self):
        return np.exp(self.x_bar)


class _MetricAdaptation(object):
    """
    Diagonal metric estimation over expanding windows: an initial fast buffer, slow windows doubling in size, and a
    terminal fast buffer.
    """
    def __init__(self, dimension, num_warmup, init_buffer=75, term_buffer=50, base_window=25):
        self.num_warmup = num_warmup
        self.enabled = num_warmup >= 20
        if self.enabled and init_buffer + base_window + term_buffer > num_warmup:
            init_buffer = int(0.15 * num_warmup)
            term_buffer = int(0.1 * num_warmup)
            base_window = num_warmup - (init_buffer + term_buffer)
        self.init_buffer = init_buffer
        self.term_buffer = term_buffer
        self.window_size = base_window
        self.next_window = init_buffer + base_window - 1
        self.counter = 0
        self.dimension = dimension
        self._reset_estimator()

    def _reset_estimator(self):
        self.n = 0
        self.mean = np.zeros(self.dimension)
        self.m2 = np.zeros(self.dimension)

    def _in_window(self):
        return self.init_buffer <= self.counter < self.num_warmup - self.term_buffer

    def _end_of_window(self):
        return self.counter == self.next_window and self.counter != self.num_warmup

    def _compute_next_window(self):
        last = self.num_warmup - self.term_buffer - 1
        if self.next_window == last:
            return
        self.window_size *= 2
        self.next_window = self.counter + self.window_size
        if self.next_window != last and self.next_window + 2 * self.window_size >= self.num_warmup - self.term_buffer:
            self.next_window = last

    def learn_variance(self, q):
        """Adds a warmup position; returns a new inverse metric at the end of a slow window, else None."""
        if not self.enabled:
            return None
        if self._in_window():
            # Welford
            self.n += 1
            delta = q - self.mean
            self.mean = self.mean + delta / self.n
            self.m2 = self.m2 + delta * (q - self.mean)
        if self._end_of_window():
            self._compute_next_window()
            n = self.n
            var = self.m2 / (n - 1) if n > 1 else np.ones(self.dimension)
            var = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            self._reset_estimator()
            self.counter += 1
            return var
        self.counter += 1
        return None


# ----------- one chain
class _ChainRunner(object):
    def __init__(self, target, config, chain):
        self.target = target
        self.config = config
        self.chain = chain
        self.rng = chain_rng(config.seed, chain)
        self.inv_metric = np.ones(target.dimension)
        self.stepsize = config.stepsize
        self.rhs_evals = 0

    # -- evaluation
    def _evaluate(self, q):
        res = self.target.evaluate(q)
        self.rhs_evals += res.stats.rhs_evals
        return res

    def _hamiltonian(self, point):
        if not np.isfinite(point.lp):
            return np.inf
        h = -point.lp + _kinetic(point.p, self.inv_metric)
        return np.inf if np.isnan(h) else h

    def _leapfrog(self, point, eps):
        evaluated = []

        def gradient_fn(q):
            res = self._evaluate(q)
            evaluated.append(res)
            return res.gradient

        q, p = leapfrog(point.q, point.p, eps, gradient_fn, self.inv_metric, gradient=point.grad)
        res = evaluated[-1]
        if res.gradient is None:
            return _Point(q, p, -np.inf, None, None)
        payload = None if res.solution is None else res.solution.states
        return _Point(q, p, res.log_density, res.gradient, payload)

    def _sample_momentum(self):
        return self.rng.standard_normal(self.target.dimension) / np.sqrt(self.inv_metric)

    # -- initialization
    def initialize(self):
        q0 = np.asarray(self.target.initial_point(), dtype=float)
        res = self._evaluate(q0)
        retries = 0
        q = q0
        while not res.ok:
            if retries >= self.config.init_retries:
                raise InitializationFailure(self.chain, retries, res.failure)
            retries += 1
            q = q0 + self.rng.uniform(-2.0, 2.0, size=q0.shape)
            logger.debug("chain %s: initial point failed (%s), retry %s", self.chain, res.failure, retries)
            res = self._evaluate(q)
        if retries:
            logger.warning("chain %s: initialized after %s jittered retries", self.chain, retries)
        payload = None if res.solution is None else res.solution.states
        return _Point(q, None, res.log_density, res.gradient, payload)

    def init_stepsize(self, z):
        """Doubles or halves the step size until one leapfrog step crosses an acceptance of 0.8."""
        if self.stepsize == 0 or self.stepsize > 1e7:
            return

        def delta_h():
            start = _Point(z.q, self._sample_momentum(), z.lp, z.grad, z.payload)
            h0 = self._hamiltonian(start)
            h = self._hamiltonian(self._leapfrog(start, self.stepsize))
            return h0 - h

        direction = 1 if delta_h() > np.log(0.8) else -1
        for _ in range(100):
            dh = delta_h()
            if direction == 1 and not dh > np.log(0.8):
                break
            if direction == -1 and not dh < np.log(0.8):
                break
            self.stepsize = self.stepsize * 2.0 if direction == 1 else self.stepsize / 2.0
            if self.stepsize > 1e7:
                raise ValueError("Step size search diverged: the posterior may be improper")
            if self.stepsize == 0:
                raise ValueError("Step size search collapsed to zero: no acceptable step size")

    # -- trajectory
    def _uturn(self, lo, hi, rho):
        """True when the merged trajectory lo + hi (in time order) makes a U-turn."""
        def no_turn(p_minus, p_plus, r):
            return np.dot(self.inv_metric * p_minus, r) > 0 and np.dot(self.inv_metric * p_plus, r) > 0

        if not no_turn(lo.left.p, hi.right.p, rho):
            return True
        # extra checks across the junction of the two subtrees
        if not no_turn(lo.left.p, hi.left.p, lo.rho + hi.left.p):
            return True
        return not no_turn(lo.right.p, hi.right.p, hi.rho + lo.right.p)

    def _build_tree(self, start, direction, depth, h0):
        if depth == 0:
            new = self._leapfrog(start, direction * self.stepsize)
            h = self._hamiltonian(new)
            divergent = (h - h0) > self.config.max_energy_error
            accept = min(1.0, np.exp(h0 - h)) if np.isfinite(h) else 0.0
            return _Tree(new, new, new, h0 - h, new.p, 1, accept, divergent, not divergent)

        first = self._build_tree(start, direction, depth - 1, h0)
        if not first.valid:
            return first
        edge = first.right if direction > 0 else first.left
        second = self._build_tree(edge, direction, depth - 1, h0)
        n_leapfrog = first.n_leapfrog + second.n_leapfrog
        sum_accept = first.sum_accept + second.sum_accept
        divergent = first.divergent or second.divergent
        if not second.valid:
            return _Tree(None, None, None, -np.inf, None, n_leapfrog, sum_accept, divergent, False)

        log_weight = np.logaddexp(first.log_weight, second.log_weight)
        if np.log(self.rng.uniform()) < second.log_weight - log_weight:
            sample = second.sample
        else:
            sample = first.sample
        lo, hi = (first, second) if direction > 0 else (second, first)
        rho = lo.rho + hi.rho
        valid = not self._uturn(lo, hi, rho)
        return _Tree(lo.left, hi.right, sample, log_weight, rho, n_leapfrog, sum_accept, divergent, valid)

    def transition(self, z):
        start = _Point(z.q, self._sample_momentum(), z.lp, z.grad, z.payload)
        h0 = self._hamiltonian(start)
        tree = _Tree(start, start, start, 0.0, start.p, 0, 0.0, False, True)
        sample = start
        depth = n_leapfrog = 0
        sum_accept = 0.0
        divergent = False
        while depth < self.config.max_depth:
            direction = 1 if self.rng.uniform() > 0.5 else -1
            edge = tree.right if direction > 0 else tree.left
            sub = self._build_tree(edge, direction, depth, h0)
            n_leapfrog += sub.n_leapfrog
            sum_accept += sub.sum_accept
            divergent = divergent or sub.divergent
            if not sub.valid:
                break
            depth += 1
            # biased progressive sampling toward the new subtree
            if sub.log_weight > tree.log_weight or self.rng.uniform() < np.exp(sub.log_weight - tree.log_weight):
                sample = sub.sample
            lo, hi = (tree, sub) if direction > 0 else (sub, tree)
            rho = lo.rho + hi.rho
            turned = self._uturn(lo, hi, rho)
            tree = _Tree(lo.left, hi.right, sample, np.logaddexp(tree.log_weight, sub.log_weight), rho,
                         n_leapfrog, sum_accept, divergent, not turned)
            if turned:
                break
        accept_stat = sum_accept / n_leapfrog if n_leapfrog else 0.0
        z_next = _Point(sample.q, None, sample.lp, sample.grad, sample.payload)
        return z_next, (accept_stat, self.stepsize, depth, n_leapfrog, divergent)

    # -- main loop
    def _adapt(self, it, z, accept_stat, step_adapt, metric_adapt):
        self.stepsize = step_adapt.learn_stepsize(accept_stat)
        new_var = metric_adapt.learn_variance(z.q)
        if new_var is not None:
            self.inv_metric = new_var
            logger.debug("chain %s: metric updated at iteration %s", self.chain, it)
            self.init_stepsize(z)
            step_adapt.mu = np.log(10 * self.stepsize)
            step_adapt.restart()
        if it == self.config.warmup - 1:
            self.stepsize = step_adapt.final_stepsize()
            logger.debug("chain %s: adapted step size %.4g", self.chain, self.stepsize)

    def run(self):
        cfg = self.config
        t_start = time.time()
        z = self.initialize()
        if cfg.adapt:
            self.init_stepsize(z)
        step_adapt = _StepSizeAdaptation(cfg.target_accept)
        step_adapt.mu = np.log(10 * self.stepsize)
        metric_adapt = _MetricAdaptation(self.target.dimension, cfg.warmup)

        n_draws = cfg.n_draws
        qs = np.empty((n_draws, self.target.dimension))
        lps = np.empty(n_draws)
        payloads = []
        stats = np.empty((n_draws, len(STAT_COLUMNS)))

        progress = None
        if cfg.progress:
            from tqdm import tqdm
            progress = tqdm(total=cfg.iterations, desc="chain %d" % self.chain, position=self.chain, leave=False)
        try:
            for it in range(cfg.iterations):
                z, info = self.transition(z)
                if it < cfg.warmup:
                    if cfg.adapt:
                        self._adapt(it, z, info[0], step_adapt, metric_adapt)
                else:
                    s = it - cfg.warmup
                    qs[s] = z.q
                    lps[s] = z.lp
                    payloads.append(z.payload)
                    stats[s] = info
                if progress is not None:
                    progress.update(1)
        finally:
            if progress is not None:
                progress.close()
        seconds = time.time() - t_start
        logger.info("chain %s done in %.1fs (%s rhs evaluations)", self.chain, seconds, self.rhs_evals)
        states = None if any(p is None for p in payloads) or not payloads else np.stack(payloads)
        return _ChainResult(qs, lps, states, stats, self.stepsize, seconds, self.rhs_evals)


class _ChainResult(object):
    __slots__ = ('eta', 'lp', 'states', 'stats', 'stepsize', 'seconds', 'rhs_evals')

    def __init__(self, eta, lp, states, stats, stepsize, seconds, rhs_evals):
        self.eta = eta
        self.lp = lp
        self.states = states
        self.stats = stats
        self.stepsize = stepsize
        self.seconds = seconds
        self.rhs_evals = rhs_evals


# ----------- results
class Draws(object):
    """
    Post-warmup draws of all chains: unconstrained parameters `eta` (C x S x P), log densities `lp` (C x S) under
    the sampling method, the ODE `states` solved at every draw (C x S x N x D, None for targets without ODE), the
    sampler statistics (C x S each) and run metadata. `gradient_mode` tells that log densities were computed along
    with gradients, which re-evaluations must reproduce.
    """
    def __init__(self,
                 param_names,          # type: Sequence[str]
                 eta,                  # type: np.ndarray
                 lp,                   # type: np.ndarray
                 states=None,          # type: np.ndarray
                 stats=None,           # type: dict
                 method=None,          # type: SolverSpec
                 transform=LOG_TRANSFORM,  # type: str
                 gradient_mode=True,   # type: bool
                 rhs_evals=0,          # type: int
                 meta=None             # type: dict
                 ):
        eta = np.asarray(eta, dtype=float)
        lp = np.asarray(lp, dtype=float)
        if eta.ndim != 3 or lp.shape != eta.shape[:2] or eta.shape[2] != len(param_names):
            raise ValueError("Inconsistent draws dimensions: eta %s, lp %s, %s names"
                             % (eta.shape, lp.shape, len(param_names)))
        if states is not None and states.shape[:2] != eta.shape[:2]:
            raise ValueError("Inconsistent states dimensions %s" % (states.shape,))
        self.param_names = tuple(param_names)
        self.eta = eta
        self.lp = lp
        self.states = states
        self.stats = stats if stats is not None else {}
        self.method = method
        self.transform = transform
        self.gradient_mode = gradient_mode
        self.rhs_evals = rhs_evals
        self.meta = meta if meta is not None else {}

    @property
    def n_chains(self):
        return self.eta.shape[0]

    @property
    def n_draws(self):
        return self.eta.shape[1]

    @property
    def n_total(self):
        return self.eta.shape[0] * self.eta.shape[1]

    def theta(self):
        """Constrained parameter values (C x S x P)."""
        return np.exp(self.eta) if self.transform == LOG_TRANSFORM else self.eta

    def flat_eta(self):
        return self.eta.reshape(-1, self.eta.shape[2])

    def flat_theta(self):
        return self.theta().reshape(-1, self.eta.shape[2])

    def flat_lp(self):
        return self.lp.reshape(-1)

    def flat_states(self):
        if self.states is None:
            return None
        return self.states.reshape((-1,) + self.states.shape[2:])

    def to_frame(self, chain):
        # type: (int) -> pd.DataFrame
        """The draws of `chain` with header `chain,iter,<params>,lp__,accept_stat,...,divergent`."""
        df = pd.DataFrame(self.theta()[chain], columns=list(self.param_names))
        df.insert(0, 'iter', np.arange(1, self.n_draws + 1))
        df.insert(0, 'chain', chain + 1)
        df['lp__'] = self.lp[chain]
        for col in STAT_COLUMNS:
            if col in self.stats:
                values = self.stats[col][chain]
                df[col] = values.astype(int) if col in ('treedepth', 'n_leapfrog', 'divergent') else values
        return df

    def save(self, folder):
        """Writes one CSV per chain, an exact binary copy `draws.npz` and the metadata `run.json` into `folder`."""
        folder = Path(folder)
        folder.mkdir(parents=True, exist_ok=True)
        for c in range(self.n_chains):
            self.to_frame(c).to_csv(str(folder / (CHAIN_CSV % (c + 1))), index=False)
        arrays = dict(eta=self.eta, lp=self.lp)
        if self.states is not None:
            arrays['states'] = self.states
        arrays.update({k: np.asarray(v) for k, v in self.stats.items()})
        np.savez(str(folder / DRAWS_NPZ), **arrays)
        run = dict(param_names=list(self.param_names), method=None if self.method is None else str(self.method),
                   transform=self.transform, gradient_mode=self.gradient_mode, rhs_evals=int(self.rhs_evals),
                   n_chains=self.n_chains, n_draws=self.n_draws, meta=self.meta)
        with open(str(folder / RUN_JSON), 'w') as f:
            json.dump(run, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, folder):
        # type: (...) -> Draws
        folder = Path(folder)
        with open(str(folder / RUN_JSON)) as f:
            run = json.load(f)
        with np.load(str(folder / DRAWS_NPZ)) as arrays:
            eta, lp = arrays['eta'], arrays['lp']
            states = arrays['states'] if 'states' in arrays.files else None
            stats = {k: arrays[k] for k in STAT_COLUMNS if k in arrays.files}
        method = None if run['method'] is None else SolverSpec.parse(run['method'])
        return cls(run['param_names'], eta, lp, states=states, stats=stats, method=method,
                   transform=run['transform'], gradient_mode=run['gradient_mode'], rhs_evals=run['rhs_evals'],
                   meta=run.get('meta', {}))


class SamplerDiagnostics(object):
    """Per-chain sampler behaviour, in the vocabulary of the sampler statistics columns."""
    def __init__(self, accept_stat, stepsize, treedepth, n_leapfrog, divergent, seconds, rhs_evals):
        self.accept_stat = list(accept_stat)
        self.stepsize = list(stepsize)
        self.treedepth = list(treedepth)
        self.n_leapfrog = list(n_leapfrog)
        self.divergent = list(divergent)
        self.seconds = list(seconds)
        self.rhs_evals = list(rhs_evals)

    @property
    def divergence_fraction(self):
        return float(np.mean(self.divergent))

    @property
    def total_rhs_evals(self):
        return int(np.sum(self.rhs_evals))

    def to_frame(self):
        return pd.DataFrame(dict(chain=np.arange(1, len(self.accept_stat) + 1), accept_stat=self.accept_stat,
                                 stepsize=self.stepsize, treedepth=self.treedepth, n_leapfrog=self.n_leapfrog,
                                 divergent=self.divergent, seconds=self.seconds, rhs_evals=self.rhs_evals))


def run_nuts(target,  # type: PosteriorTarget
             config,  # type: SamplerConfig
             method=None,  # type: SolverSpec
             meta=None  # type: dict
             ):
    # type: (...) -> Tuple[Draws, SamplerDiagnostics]
    """
    Runs `config.chains` independent chains on `target` (any object with `dimension`, `param_names`, `transform`,
    `initial_point()` and `evaluate(eta)` returning a `PosteriorEvalResult` with gradient). Chains are spread over
    `config.threads` threads; chain c uses the random stream (seed, c).
    """
    results = parallel_map(lambda c: _ChainRunner(target, config, c).run(), range(config.chains),
                           threads=config.threads)
    stats = {col: np.stack([r.stats[:, i] for r in results]) for i, col in enumerate(STAT_COLUMNS)}
    states = None
    if all(r.states is not None for r in results):
        states = np.stack([r.states for r in results])
    rhs_evals = sum(r.rhs_evals for r in results)
    draws = Draws(target.param_names, np.stack([r.eta for r in results]), np.stack([r.lp for r in results]),
                  states=states, stats=stats, method=method, transform=getattr(target, 'transform', LOG_TRANSFORM),
                  gradient_mode=True, rhs_evals=rhs_evals, meta=meta)
    diagnostics = SamplerDiagnostics(accept_stat=[r.stats[:, 0].mean() for r in results],
                                     stepsize=[r.stepsize for r in results],
                                     treedepth=[r.stats[:, 2].mean() for r in results],
                                     n_leapfrog=[r.stats[:, 3].mean() for r in results],
                                     divergent=[r.stats[:, 4].mean() for r in results],
                                     seconds=[r.seconds for r in results],
                                     rhs_evals=[r.rhs_evals for r in results])
    if diagnostics.divergence_fraction > 0.01:
        logger.warning("%.1f%% of the post-warmup transitions diverged", 100 * diagnostics.divergence_fraction)
    return draws, diagnostics


def nuts_sample(model,   # type: PosteriorModel
                spec,    # type: SolverSpec
                config,  # type: SamplerConfig
                meta=None  # type: dict
                ):
    # type: (...) -> Tuple[Draws, SamplerDiagnostics]
    """
    Samples the posterior of `model` with its ODE solved by `spec`. Chains start at the model initial point
    (jittered only if the density is not finite there) and run a windowed warmup before the sampling phase.

    :return: a tuple (draws, diagnostics)
    """
    meta = dict(meta or {}, model=model.name, seed=config.seed)
    return run_nuts(PosteriorTarget(model, spec), config, method=spec, meta=meta)


# ----------- convergence diagnostics
def _split_chains(x):
    """(C, S) -> (2C, S // 2), dropping the middle draw when S is odd."""
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def _z_scale(x):
    ranks = rankdata(x, method='average').reshape(x.shape)
    return ndtri((ranks - 0.375) / (x.size + 0.25))


def _rhat(x):
    n = x.shape[1]
    between = n * np.var(x.mean(axis=1), ddof=1)
    within = np.mean(np.var(x, axis=1, ddof=1))
    return float(np.sqrt(((n - 1.0) / n * within + between / n) / within))


def _autocovariance(x):
    n = len(x)
    m = next_fast_len(2 * n)
    centered = x - x.mean()
    f = np.fft.rfft(centered, n=m)
    return np.fft.irfft(f * np.conjugate(f), n=m)[:n] / n


def _ess(x):
    """Effective sample size of (M, N) chains with Geyer's initial monotone sequence."""
    m, n = x.shape
    acov = np.stack([_autocovariance(c) for c in x])
    mean_var = np.mean(acov[:, 0]) * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += np.var(x.mean(axis=1), ddof=1)
    if var_plus == 0:
        return np.nan
    rho_hat = np.zeros(n)
    rho_even = 1.0
    rho_hat[0] = rho_even
    rho_odd = 1.0 - (mean_var - np.mean(acov[:, 1])) / var_plus
    rho_hat[1] = rho_odd
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0:
        rho_even = 1.0 - (mean_var - np.mean(acov[:, t + 1])) / var_plus
        rho_odd = 1.0 - (mean_var - np.mean(acov[:, t + 2])) / var_plus
        if rho_even + rho_odd >= 0:
            rho_hat[t + 1] = rho_even
            rho_hat[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho_hat[max_t + 1] = rho_even
    # monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t]:
            rho_hat[t + 1] = (rho_hat[t - 1] + rho_hat[t]) / 2.0
            rho_hat[t + 2] = rho_hat[t + 1]
        t += 2
    ess = m * n
    tau = -1.0 + 2.0 * np.sum(rho_hat[:max_t + 1]) + np.sum(rho_hat[max_t + 1:max_t + 2])
    tau = max(tau, 1.0 / np.log10(ess))
    return float(ess / tau)


def rhat_rank(x):
    """Rank-normalized split R-hat of (C, S) draws: the max of the bulk and the folded versions."""
    bulk = _rhat(_z_scale(_split_chains(x)))
    folded = _rhat(_z_scale(_split_chains(np.abs(x - np.median(x)))))
    return max(bulk, folded)


def ess_bulk(x):
    return _ess(_z_scale(_split_chains(x)))


def ess_tail(x):
    q05, q95 = np.quantile(x, [0.05, 0.95])
    low = _ess(_split_chains((x <= q05).astype(float)))
    high = _ess(_split_chains((x <= q95).astype(float)))
    return float(np.nanmin([low, high]))


class ConvergenceSummary(object):
    """Per-parameter rank-normalized split R-hat, bulk and tail ESS, with means and Monte Carlo standard errors."""
    def __init__(self, names, mean, sd, rhat, ess_bulk, ess_tail):
        self.names = tuple(names)
        self.mean = np.asarray(mean)
        self.sd = np.asarray(sd)
        self.rhat = np.asarray(rhat)
        self.ess_bulk = np.asarray(ess_bulk)
        self.ess_tail = np.asarray(ess_tail)

    @property
    def mcse_mean(self):
        return self.sd / np.sqrt(self.ess_bulk)

    @property
    def max_rhat(self):
        return float(np.max(self.rhat))

    @property
    def min_ess_bulk(self):
        return float(np.min(self.ess_bulk))

    @property
    def min_ess_tail(self):
        return float(np.min(self.ess_tail))

    def to_frame(self):
        return pd.DataFrame(dict(parameter=list(self.names), mean=self.mean, sd=self.sd, mcse_mean=self.mcse_mean,
                                 rhat=self.rhat, ess_bulk=self.ess_bulk, ess_tail=self.ess_tail))

    def aggregates(self):
        return dict(max_rhat=self.max_rhat, min_ess_bulk=self.min_ess_bulk, min_ess_tail=self.min_ess_tail)


def convergence_summary(draws,       # type: Union[Draws, np.ndarray]
                        names=None   # type: Sequence[str]
                        ):
    # type: (...) -> ConvergenceSummary
    """
    Computes the convergence summary of the constrained draws (or of a raw C x S x P array). All post-warmup draws
    of all chains are pooled.
    """
    if isinstance(draws, Draws):
        x = draws.theta()
        names = draws.param_names
    else:
        x = np.asarray(draws, dtype=float)
        if x.ndim == 2:
            x = x[:, :, None]
        names = names or ['p%d' % i for i in range(x.shape[2])]
    n_chains, n_draws, n_params = x.shape
    if n_draws < 4:
        raise ValueError("At least 4 draws per chain are needed, found %s" % n_draws)
    if n_chains < 2 or n_draws < 100:
        warnings.warn("Convergence diagnostics are unreliable with %s chain(s) of %s draws" % (n_chains, n_draws))
    constant = [names[i] for i in range(n_params) if np.ptp(x[:, :, i]) == 0]
    if constant:
        raise DegenerateChains(constant)
    return ConvergenceSummary(names,
                              mean=[x[:, :, i].mean() for i in range(n_params)],
                              sd=[x[:, :, i].std(ddof=1) for i in range(n_params)],
                              rhat=[rhat_rank(x[:, :, i]) for i in range(n_params)],
                              ess_bulk=[ess_bulk(x[:, :, i]) for i in range(n_params)],
                              ess_tail=[ess_tail(x[:, :, i]) for i in range(n_params)])
