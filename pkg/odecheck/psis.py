#  Authors: The odecheck contributors
#
#  License: 3-clause BSD, <LICENSE>
"""
Importance ratios between the posteriors induced by two solving methods, generalized Pareto tail fitting, Pareto
smoothing of the ratios with its k-hat reliability diagnostic, and self-normalized estimates.

All ratio arithmetic happens on log ratios, shifted by their maximum before exponentiation.
"""
import logging
import time
import warnings

import numpy as np

from odecheck.models import unnorm_log_posterior
from odecheck.ode import SolverSpec
from odecheck.utils import DomainError, parallel_map

try:
    # noinspection PyUnresolvedReferences
    from typing import Callable, Optional, Sequence, Union
    from odecheck.sampler import Draws
    from odecheck.models import PosteriorModel
except ImportError:
    pass

logger = logging.getLogger(__name__)

KHAT_THRESHOLD = 0.7
MIN_RATIOS = 25
RELIABLE = 'reliable'
UNRELIABLE = 'unreliable'


class TooFewRatios(ValueError):
    def __init__(self, n_finite, n_min=MIN_RATIOS):
        self.n_finite = n_finite
        self.n_min = n_min

    def __str__(self):
        return "At least %s finite log ratios are needed to fit a tail, found %s" % (self.n_min, self.n_finite)


class DegenerateTail(ValueError):
    """Raised when all tail ratios are equal: the tail shape cannot be estimated."""
    def __init__(self, value):
        self.value = value

    def __str__(self):
        return "All tail ratios are equal (%r), the tail shape is undefined" % self.value


class UnfittableTail(ValueError):
    """Raised when the tail fit does not give a finite shape and a positive scale (e.g. many ties at the cutoff)."""
    def __init__(self, k, sigma, n_tied):
        self.k = k
        self.sigma = sigma
        self.n_tied = n_tied

    def __str__(self):
        return "The tail fit is not usable (k=%r, sigma=%r), %s tail ratios are tied with the cutoff" \
               % (self.k, self.sigma, self.n_tied)


class AllZeroWeights(ValueError):
    def __str__(self):
        return "All importance weights are zero"


class LogRatios(object):
    """
    Per-draw log importance ratios log p(theta | M*) - log p(theta | M) (up to a common constant). Draws where M*
    failed have a -inf ratio and are flagged in `failed`. `solutions_star` holds the M* states of every draw
    (S x N x D, NaN rows for failed draws) and `rhs_evals` the cost of the M* re-solves.
    """
    def __init__(self,
                 log_ratios,           # type: np.ndarray
                 failed=None,          # type: np.ndarray
                 method=None,          # type: SolverSpec
                 method_star=None,     # type: SolverSpec
                 solutions_star=None,  # type: np.ndarray
                 rhs_evals=0,          # type: int
                 seconds=0.            # type: float
                 ):
        self.log_ratios = np.asarray(log_ratios, dtype=float)
        self.failed = np.zeros(self.log_ratios.shape, dtype=bool) if failed is None else np.asarray(failed, bool)
        self.method = method
        self.method_star = method_star
        self.solutions_star = solutions_star
        self.rhs_evals = rhs_evals
        self.seconds = seconds

    def __len__(self):
        return len(self.log_ratios)

    @property
    def n_failed(self):
        return int(np.sum(self.failed))

    def usable(self):
        """Mask of the draws whose ratio takes part in fitting and weighting."""
        return ~self.failed & np.isfinite(self.log_ratios)

    @property
    def max_log_ratio(self):
        ok = self.usable()
        return float(np.max(self.log_ratios[ok])) if np.any(ok) else np.nan


def _as_log_ratios(ratios):
    if isinstance(ratios, LogRatios):
        return ratios
    return LogRatios(ratios)


def compute_log_ratios(draws,          # type: Draws
                       model,          # type: PosteriorModel
                       spec_star,      # type: SolverSpec
                       threads=1,      # type: int
                       progress=False  # type: bool
                       ):
    # type: (...) -> LogRatios
    """
    Re-solves the ODE at every stored draw with `spec_star` and subtracts the stored log densities. The evaluation
    mode (with or without gradient) is the one the draws were produced with, so that `spec_star` equal to the
    sampling method gives ratios that are exactly 0.

    :param draws: the sampled draws, with their log densities under the sampling method
    :param model: the posterior model the draws were sampled from
    :param spec_star: the (more accurate) method M*
    :param threads: number of worker threads for the per-draw re-solves
    :param progress: show a progress bar
    :return:
    """
    spec_star = SolverSpec.parse(spec_star)
    eta = draws.flat_eta()
    lp = draws.flat_lp()
    t_start = time.time()

    bar = None
    if progress:
        from tqdm import tqdm
        bar = tqdm(total=len(eta), desc=str(spec_star), leave=False)

    def evaluate(s):
        res = unnorm_log_posterior(model, eta[s], spec_star, want_gradient=draws.gradient_mode)
        if bar is not None:
            bar.update(1)
        return res

    try:
        results = parallel_map(evaluate, range(len(eta)), threads=threads)
    finally:
        if bar is not None:
            bar.close()

    failed = np.array([not r.ok for r in results], dtype=bool)
    log_ratios = np.array([r.log_density for r in results]) - lp
    log_ratios[failed] = -np.inf
    rhs_evals = sum(r.stats.rhs_evals for r in results)

    solutions = None
    shapes = [r.solution.states.shape for r in results if r.ok]
    if shapes:
        solutions = np.full((len(eta),) + shapes[0], np.nan)
        for s, r in enumerate(results):
            if r.ok:
                solutions[s] = r.solution.states

    if failed.any():
        reasons = sorted(set(r.failure for r in results if not r.ok))
        msg = "%s of %s draws could not be evaluated with %s: %s" % (failed.sum(), len(eta), spec_star,
                                                                     "; ".join(reasons))
        logger.warning(msg)
        warnings.warn(msg)

    return LogRatios(log_ratios, failed, method=draws.method, method_star=spec_star, solutions_star=solutions,
                     rhs_evals=rhs_evals, seconds=time.time() - t_start)


# ----------- generalized Pareto distribution
def gpd_density(x, u, sigma, k):
    """
    Density of the generalized Pareto distribution with location `u`, scale `sigma` and shape `k`:

        (1 / sigma) * (1 + k (x - u) / sigma) ** (-1 / k - 1)   for k != 0
        (1 / sigma) * exp(-(x - u) / sigma)                      for k == 0

    Raises `DomainError` when x is outside of the support [u, inf) (or [u, u - sigma / k] for k < 0).

    >>> round(float(gpd_density(1.0, 0.0, 1.0, 0.5)), 12) == round(8 / 27, 12)
    True
    """
    if not sigma > 0:
        raise DomainError('sigma', sigma)
    z = (np.asarray(x, dtype=float) - u) / sigma
    if np.any(z < 0) or (k < 0 and np.any(z > -1.0 / k)):
        raise DomainError('x', x)
    if k == 0:
        return np.exp(-z) / sigma
    return (1.0 + k * z) ** (-1.0 / k - 1.0) / sigma


def gpd_quantile(p, u, sigma, k):
    """Inverse cumulative distribution function of the generalized Pareto distribution, for p in [0, 1)."""
    p = np.asarray(p, dtype=float)
    if k == 0:
        return u - sigma * np.log1p(-p)
    return u + sigma * np.expm1(-k * np.log1p(-p)) / k


class GpdFit(object):
    """A fitted generalized Pareto tail: cutoff `u`, scale `sigma`, shape `k` and number of tail values `n_tail`."""
    __slots__ = ('u', 'sigma', 'k', 'n_tail')

    def __init__(self, u, sigma, k, n_tail):
        self.u = u
        self.sigma = sigma
        self.k = k
        self.n_tail = n_tail

    def quantile(self, p):
        return gpd_quantile(p, self.u, self.sigma, self.k)

    def __repr__(self):
        return "GpdFit(u=%r, sigma=%r, k=%r, n_tail=%r)" % (self.u, self.sigma, self.k, self.n_tail)


def tail_size(n):
    """Number of largest ratios used for the tail fit: min(ceil(0.2 n), ceil(3 sqrt(n)))."""
    return int(min(np.ceil(0.2 * n), np.ceil(3.0 * np.sqrt(n))))


def _gpdfit(exceedances):
    """
    Empirical Bayes estimate of (k, sigma) from sorted exceedances, after Zhang and Stephens, with the weakly
    informative regularization of k toward 0.5 for small tails.
    """
    prior_bs = 3
    prior_k = 10
    n = len(exceedances)
    m_est = 30 + int(np.sqrt(n))

    quartile = exceedances[int(n / 4.0 + 0.5) - 1]
    if quartile <= 0:
        # zero quartile: the prior grid on b is undefined
        return np.nan, np.nan

    b = 1.0 - np.sqrt(m_est / (np.arange(1, m_est + 1, dtype=float) - 0.5))
    b /= prior_bs * quartile
    b += 1.0 / exceedances[-1]

    with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
        k = np.log1p(-b[:, None] * exceedances).mean(axis=1)
        len_scale = n * (np.log(-(b / k)) - k - 1.0)
        weights = 1.0 / np.exp(len_scale - len_scale[:, None]).sum(axis=1)

        # drop negligible weights
        keep = weights >= 10 * np.finfo(float).eps
        weights, b = weights[keep], b[keep]
        weights /= weights.sum()

        b_post = np.sum(b * weights)
        k_post = np.log1p(-b_post * exceedances).mean()
        sigma = -k_post / b_post
    k_post = (n * k_post + prior_k * 0.5) / (n + prior_k)
    return float(k_post), float(sigma)


def _fit_scaled_tail(scaled):
    """
    Fits the tail of `scaled` (ratios divided by their max, all finite). Returns (fit, order) where order sorts the
    input ascending.
    """
    n = len(scaled)
    if n < MIN_RATIOS:
        raise TooFewRatios(n)
    m = tail_size(n)
    order = np.argsort(scaled, kind='mergesort')
    tail = scaled[order[n - m:]]
    if np.max(tail) - np.min(tail) < np.finfo(float).tiny:
        raise DegenerateTail(float(tail[0]))
    cutoff = scaled[order[n - m - 1]]
    k, sigma = _gpdfit(tail - cutoff)
    if not (np.isfinite(k) and np.isfinite(sigma) and sigma > 0):
        raise UnfittableTail(k, sigma, int(np.sum(tail <= cutoff)))
    return GpdFit(u=float(cutoff), sigma=sigma, k=k, n_tail=m), order


def fit_gpd_tail(ratios):
    # type: (Union[LogRatios, np.ndarray]) -> GpdFit
    """
    Fits a generalized Pareto distribution to the largest importance ratios.

    The tail holds the M = min(ceil(0.2 S), ceil(3 sqrt(S))) largest of the S finite ratios, the cutoff u is the
    (S - M)-th order statistic, and (k, sigma) are estimated on the exceedances over u. Ratios are first divided by
    their maximum, so `u` and `sigma` are expressed relative to the largest ratio.

    :param ratios: a `LogRatios` or an array of log ratios
    :return:
    """
    ratios = _as_log_ratios(ratios)
    lw = ratios.log_ratios[ratios.usable()]
    if len(lw) < MIN_RATIOS:
        raise TooFewRatios(len(lw))
    fit, _ = _fit_scaled_tail(np.exp(lw - np.max(lw)))
    return fit


class PsisResult(object):
    """
    Pareto smoothed importance weights (normalized, zero for failed draws), their logarithm, the shape estimate
    `khat` (-inf when the tail was degenerate, +inf when it could not be fit, smoothing skipped in both cases), the
    relative efficiency `r_eff`, the tail size used and the tail `fit` (None when smoothing was skipped).
    """
    def __init__(self, weights, log_weights, khat, r_eff, n_tail, fit=None, failed=None):
        self.weights = weights
        self.log_weights = log_weights
        self.khat = khat
        self.r_eff = r_eff
        self.n_tail = n_tail
        self.fit = fit
        self.failed = failed

    @property
    def verdict(self):
        return khat_verdict(self.khat)

    def __repr__(self):
        return "PsisResult(khat=%r, r_eff=%r, n_tail=%r)" % (self.khat, self.r_eff, self.n_tail)


def pareto_smooth(ratios):
    # type: (Union[LogRatios, np.ndarray]) -> PsisResult
    """
    Pareto smoothed importance sampling: the M largest raw ratios are replaced by the fitted GPD quantiles at
    (z - 1/2) / M, z = 1..M, truncated at the largest raw ratio, and the weights are normalized. A degenerate tail
    (all tail ratios equal) skips the smoothing and reports khat = -inf. A tail the fit cannot describe (a quarter or
    more of it tied with the cutoff) also skips the smoothing and reports khat = +inf, which is unreliable.

    :param ratios: a `LogRatios` or an array of log ratios
    :return:
    """
    ratios = _as_log_ratios(ratios)
    ok = ratios.usable()
    lw = ratios.log_ratios[ok]
    if len(lw) == 0:
        raise AllZeroWeights()
    if len(lw) < MIN_RATIOS:
        raise TooFewRatios(len(lw))

    shifted = lw - np.max(lw)
    n_tail = tail_size(len(lw))
    try:
        fit, order = _fit_scaled_tail(np.exp(shifted))
    except DegenerateTail:
        khat, fit = -np.inf, None
    except UnfittableTail as e:
        logger.warning("%s: k-hat set to +inf, weights left unsmoothed", e)
        khat, fit = np.inf, None
    else:
        khat = fit.k
        if np.isfinite(khat):
            p = (np.arange(1, n_tail + 1) - 0.5) / n_tail
            smoothed = np.minimum(fit.quantile(p), 1.0)
            with np.errstate(divide='ignore'):
                shifted[order[len(lw) - n_tail:]] = np.log(smoothed)

    log_weights = np.full(len(ratios), -np.inf)
    log_weights[ok] = shifted - np.logaddexp.reduce(shifted)
    weights = np.exp(log_weights)
    return PsisResult(weights, log_weights, khat, relative_efficiency(weights), n_tail, fit=fit,
                      failed=~ok)


def snis_estimate(draws,     # type: Union[Draws, np.ndarray]
                  weights,   # type: np.ndarray
                  phi=None   # type: Callable
                  ):
    """
    Self-normalized importance sampling estimate sum_s w_s phi(theta_s) / sum_s w_s.

    :param draws: a `Draws` (its constrained parameters are used, chains flattened) or an array with one draw per row
    :param weights: nonnegative weights, one per draw
    :param phi: the estimand, applied to each draw. Defaults to the identity (posterior means)
    :return:
    """
    rows = draws.flat_theta() if hasattr(draws, 'flat_theta') else np.asarray(draws, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(rows):
        raise ValueError("%s weights for %s draws" % (len(weights), len(rows)))
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("Weights should be finite and nonnegative")
    total = weights.sum()
    if not total > 0:
        raise AllZeroWeights()
    values = rows if phi is None else np.array([phi(x) for x in rows], dtype=float)
    return np.tensordot(weights, values, axes=(0, 0)) / total


def relative_efficiency(weights):
    """r_eff = 1 / (S sum_s w_s^2) for normalized weights: 1 for uniform weights, 1/S for a single nonzero one."""
    weights = np.asarray(weights, dtype=float)
    return float(1.0 / (len(weights) * np.sum(weights ** 2)))


def khat_verdict(khat):
    """'reliable' iff khat < 0.7 (the -inf sentinel of equal ratios is reliable)."""
    return RELIABLE if khat < KHAT_THRESHOLD else UNRELIABLE
