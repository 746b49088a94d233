#  Authors: The odecheck contributors
#
#  License: 3-clause BSD, <LICENSE>
"""
The reliability check of a posterior sampled with a cheap solving method M: importance ratios toward a ladder of
increasingly accurate methods M*, convergence tracking of the maximum absolute error (MAE) and of k-hat, and the
accept / resample verdict. Accepted reports give corrected estimates.
"""
import json
import logging
import time
import warnings

import numpy as np
import pandas as pd

from odecheck.ode import SolverSpec
from odecheck.psis import compute_log_ratios, pareto_smooth, khat_verdict, RELIABLE, KHAT_THRESHOLD, \
    AllZeroWeights, TooFewRatios

try:
    # noinspection PyUnresolvedReferences
    from typing import Sequence, Optional, Union, Dict, Callable, List, Tuple
    from odecheck.sampler import Draws
    from odecheck.models import PosteriorModel
    from odecheck.psis import PsisResult
except ImportError:
    pass

logger = logging.getLogger(__name__)

ACCEPT = 'accept'
RESAMPLE = 'resample'
DEFAULT_LADDER = 'default'


class InvalidLadder(ValueError):
    """Raised when a rung is not strictly more accurate than the previous rung of the same family."""
    def __init__(self, previous, rung):
        self.previous = previous
        self.rung = rung

    def __str__(self):
        return "Ladder rung %s is not more accurate than the previous rung %s" % (self.rung, self.previous)


class LadderTooShort(ValueError):
    def __init__(self, n_rungs):
        self.n_rungs = n_rungs

    def __str__(self):
        return "A method ladder needs at least 2 rungs to assess convergence, found %s" % self.n_rungs


class ShapeMismatch(ValueError):
    def __init__(self, shape_m, shape_star):
        self.shape_m = shape_m
        self.shape_star = shape_star

    def __str__(self):
        return "Solutions do not line up: %s vs %s" % (self.shape_m, self.shape_star)


class VerdictMismatch(ValueError):
    def __init__(self, verdict):
        self.verdict = verdict

    def __str__(self):
        return "Corrected estimates need an '%s' verdict, this report says '%s'" % (ACCEPT, self.verdict)


class MethodLadder(object):
    """
    Ordered methods M* of increasing accuracy, with the convergence thresholds. Within a family each rung must be
    strictly more accurate than the previous one; rungs of different families are ordered by their position.
    """
    def __init__(self,
                 rungs,            # type: Sequence[Union[str, SolverSpec]]
                 delta_mae=0.05,   # type: float
                 delta_k=0.02,     # type: float
                 mae_floor=1e-12   # type: float
                 ):
        rungs = [SolverSpec.parse(r) for r in rungs]
        if len(rungs) < 2:
            raise LadderTooShort(len(rungs))
        for previous, rung in zip(rungs[:-1], rungs[1:]):
            if previous.family == rung.family and not rung.is_more_accurate_than(previous):
                raise InvalidLadder(previous, rung)
        self.rungs = rungs
        self.delta_mae = delta_mae
        self.delta_k = delta_k
        self.mae_floor = mae_floor

    @classmethod
    def default_for(cls, method, **thresholds):
        # type: (...) -> MethodLadder
        """
        Default ladder for sampling method `method`: tolerances divided by 10**i (capped at 1e-12, duplicates removed)
        or steps multiplied by 2**i, for i = 1..6.
        """
        method = SolverSpec.parse(method)
        rungs = []
        for i in range(1, 7):
            rung = method.refined(i)
            if rung not in rungs:
                rungs.append(rung)
        return cls(rungs, **thresholds)

    @classmethod
    def parse(cls, text, method, **thresholds):
        # type: (...) -> MethodLadder
        """`'default'` or a comma separated list of specs such as `'rk4(6), rk4(12)'`."""
        if text is None or text.strip().lower() == DEFAULT_LADDER:
            return cls.default_for(method, **thresholds)
        # split on the commas that separate specs, not those inside parentheses
        rungs, depth, current = [], 0, ''
        for ch in text:
            if ch == ',' and depth == 0:
                rungs.append(current)
                current = ''
                continue
            depth += ch == '('
            depth -= ch == ')'
            current += ch
        rungs.append(current)
        return cls([r.strip() for r in rungs if r.strip()], **thresholds)

    def __len__(self):
        return len(self.rungs)

    def __str__(self):
        return ", ".join(str(r) for r in self.rungs)

    @property
    def thresholds(self):
        return dict(delta_mae=self.delta_mae, delta_k=self.delta_k, mae_floor=self.mae_floor)


class RungRecord(object):
    """The outcome of one ladder rung."""
    FIELDS = ('method', 'mae', 'max_ratio', 'max_log_ratio', 'khat', 'r_eff', 'failed_draws', 'seconds',
              'rhs_evals')

    def __init__(self, method, mae, max_log_ratio, khat, r_eff, failed_draws, seconds, rhs_evals, psis=None,
                 ratios=None):
        self.method = method
        self.mae = mae
        self.max_log_ratio = max_log_ratio
        self.khat = khat
        self.r_eff = r_eff
        self.failed_draws = failed_draws
        self.seconds = seconds
        self.rhs_evals = rhs_evals
        self.psis = psis
        self.ratios = ratios

    @property
    def max_ratio(self):
        """Largest raw ratio. Ratios are normalized so that equal methods give 1."""
        return float(np.exp(self.max_log_ratio))

    def to_dict(self):
        d = {f: getattr(self, f) for f in self.FIELDS}
        d['method'] = str(self.method)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(SolverSpec.parse(d['method']), float(d['mae']), float(d['max_log_ratio']), float(d['khat']),
                   float(d['r_eff']), d['failed_draws'], float(d['seconds']), d['rhs_evals'])


def compute_mae(solutions_m,         # type: np.ndarray
                solutions_star,      # type: np.ndarray
                failed=None          # type: np.ndarray
                ):
    # type: (...) -> float
    """
    Maximum absolute difference between two sets of solutions (S x N x D) over draws, times and components. Draws
    flagged in `failed` are excluded.

    >>> compute_mae(np.array([[[1.0, 2.0]]]), np.array([[[1.5, 1.9]]]))
    0.5
    """
    solutions_m = np.asarray(solutions_m, dtype=float)
    solutions_star = np.asarray(solutions_star, dtype=float)
    if solutions_m.shape != solutions_star.shape:
        raise ShapeMismatch(solutions_m.shape, solutions_star.shape)
    if failed is not None:
        keep = ~np.asarray(failed, dtype=bool)
        solutions_m, solutions_star = solutions_m[keep], solutions_star[keep]
    if solutions_m.size == 0:
        return np.nan
    return float(np.max(np.abs(solutions_m - solutions_star)))


def _relative_change(previous, current, floor):
    return abs(current - previous) / max(current, floor)


def _khat_change(previous, current):
    if previous == current:
        # includes two -inf sentinels
        return 0.0
    if not (np.isfinite(previous) and np.isfinite(current)):
        return np.inf
    return abs(current - previous)


class WorkflowReport(object):
    """
    Outcome of a reliability check: one `RungRecord` per evaluated rung, the verdict ('accept' or 'resample'), the
    index of the converged rung (None if the ladder was exhausted), the thresholds used, the sampling method, a
    suggested finer sampling method on resample and the rhs costs of the check and of the sampling.
    """
    def __init__(self,
                 rungs,                  # type: List[RungRecord]
                 verdict,                # type: str
                 converged_rung,         # type: Optional[int]
                 thresholds,             # type: Dict[str, float]
                 method=None,            # type: SolverSpec
                 suggested_method=None,  # type: SolverSpec
                 note='',                # type: str
                 sampling_rhs_evals=0    # type: int
                 ):
        self.rungs = rungs
        self.verdict = verdict
        self.converged_rung = converged_rung
        self.thresholds = thresholds
        self.method = method
        self.suggested_method = suggested_method
        self.note = note
        self.sampling_rhs_evals = sampling_rhs_evals

    @property
    def accepted(self):
        return self.verdict == ACCEPT

    @property
    def final(self):
        # type: (...) -> RungRecord
        """The converged rung, or the last evaluated one."""
        return self.rungs[self.converged_rung if self.converged_rung is not None else -1]

    @property
    def psis(self):
        # type: (...) -> Optional[PsisResult]
        """The smoothed weights of the converged rung when the report is accepted."""
        return self.final.psis if self.accepted else None

    @property
    def workflow_rhs_evals(self):
        return int(sum(r.rhs_evals for r in self.rungs))

    def rungs_frame(self):
        return pd.DataFrame([r.to_dict() for r in self.rungs], columns=list(RungRecord.FIELDS))

    def to_dict(self):
        return dict(rungs=[r.to_dict() for r in self.rungs], verdict=self.verdict,
                    converged_rung=self.converged_rung, thresholds=self.thresholds,
                    method=None if self.method is None else str(self.method),
                    suggested_method=None if self.suggested_method is None else str(self.suggested_method),
                    note=self.note, workflow_rhs_evals=self.workflow_rhs_evals,
                    sampling_rhs_evals=self.sampling_rhs_evals)

    def to_json(self, path=None):
        """
        Returns the JSON document, and writes it to `path` if given. Non-finite numbers (the -inf k-hat sentinel,
        NaN for rungs that could not be smoothed) are written as the strings "inf", "-inf" and "nan".
        """
        text = json.dumps(_strict_json(self.to_dict()), indent=2, allow_nan=False)
        if path is not None:
            with open(str(path), 'w') as f:
                f.write(text)
        return text

    @classmethod
    def read_json(cls, path):
        # type: (...) -> WorkflowReport
        """Reads a report written by `to_json`. The smoothed weights are not part of it."""
        with open(str(path)) as f:
            d = json.load(f)
        parse = lambda s: None if s is None else SolverSpec.parse(s)  # noqa: E731
        return cls([RungRecord.from_dict(r) for r in d['rungs']], d['verdict'], d['converged_rung'],
                   d['thresholds'], method=parse(d['method']), suggested_method=parse(d['suggested_method']),
                   note=d.get('note', ''), sampling_rhs_evals=d.get('sampling_rhs_evals', 0))


def _strict_json(obj):
    if isinstance(obj, dict):
        return {k: _strict_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_strict_json(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def _evaluate_rung(draws, model, rung, threads, progress):
    ratios = compute_log_ratios(draws, model, rung, threads=threads, progress=progress)
    if draws.states is not None and ratios.solutions_star is not None:
        mae = compute_mae(draws.flat_states(), ratios.solutions_star, failed=ratios.failed)
    else:
        mae = np.nan
    try:
        psis = pareto_smooth(ratios)
        khat, r_eff = psis.khat, psis.r_eff
    except AllZeroWeights:
        psis, khat, r_eff = None, np.nan, 0.0
    except TooFewRatios as e:
        logger.warning("rung %s: %s", rung, e)
        psis, khat, r_eff = None, np.nan, np.nan
    return RungRecord(rung, mae, ratios.max_log_ratio, khat, r_eff, ratios.n_failed, ratios.seconds,
                      ratios.rhs_evals, psis=psis, ratios=ratios)


def decide_verdict(records,    # type: Sequence[RungRecord]
                   converged   # type: Optional[int]
                   ):
    # type: (...) -> Tuple[str, str]
    """
    The verdict of a ladder evaluation and its explanation. 'accept' requires a converged rung and k-hat below
    0.7 at that rung and at every rung evaluated after it.
    """
    if converged is None:
        return RESAMPLE, "ladder exhausted without convergence of MAE and k-hat; extend the ladder or refine the method"
    rung = records[converged]
    if khat_verdict(rung.khat) != RELIABLE:
        return RESAMPLE, "k-hat converged to %.3f >= %s: the sampling method is too inaccurate" \
            % (rung.khat, KHAT_THRESHOLD)
    for later in records[converged + 1:]:
        if khat_verdict(later.khat) != RELIABLE:
            return RESAMPLE, "k-hat converged to %.3f at %s but rose to %.3f >= %s at %s" \
                % (rung.khat, rung.method, later.khat, KHAT_THRESHOLD, later.method)
    return ACCEPT, "k-hat converged to %.3f < %s at %s" % (rung.khat, KHAT_THRESHOLD, rung.method)


def run_reliability_check(draws,                    # type: Draws
                          model,                    # type: PosteriorModel
                          ladder,                   # type: MethodLadder
                          threads=1,                # type: int
                          stop_at_convergence=True,  # type: bool
                          progress=False            # type: bool
                          ):
    # type: (...) -> WorkflowReport
    """
    Evaluates the ladder rungs in order: log ratios toward the rung, MAE against the stored sampling solutions, and
    Pareto smoothing. Convergence is declared at the first rung i such that, compared with rung i - 1,

        |MAE_i - MAE_{i-1}| / max(MAE_i, mae_floor) < delta_mae   and   |khat_i - khat_{i-1}| < delta_k

    and the verdict is 'accept' iff khat is below 0.7 at the converged rung and at every rung evaluated after it
    (see `decide_verdict`). An exhausted ladder gives 'resample'. On 'resample' the suggested method is one default
    refinement of the sampling method. A rung with fewer than 25 usable ratios is recorded with a NaN khat and cannot
    converge.

    :param draws: draws sampled with a known method
    :param model: the model the draws were sampled from
    :param ladder: the methods M* to evaluate
    :param threads: worker threads for the per-draw re-solves
    :param stop_at_convergence: if False, all rungs are evaluated (convergence is still the first converged rung)
    :param progress: show progress bars
    :return:
    """
    if len(ladder) < 2:
        raise LadderTooShort(len(ladder))
    if draws.method is None:
        raise ValueError("The draws do not record the method they were sampled with")

    records = []
    converged = None
    for i, rung in enumerate(ladder.rungs):
        t_start = time.time()
        record = _evaluate_rung(draws, model, rung, threads, progress)
        records.append(record)
        logger.info("rung %s %s: mae=%.3g max_log_ratio=%.3g khat=%.3f r_eff=%.3f failed=%s", i, rung, record.mae,
                    record.max_log_ratio, record.khat, record.r_eff, record.failed_draws)
        logger.debug("rung %s took %.2fs", i, time.time() - t_start)
        if i > 0 and converged is None:
            previous = records[i - 1]
            d_mae = _relative_change(previous.mae, record.mae, ladder.mae_floor)
            d_k = _khat_change(previous.khat, record.khat)
            if d_mae < ladder.delta_mae and d_k < ladder.delta_k:
                converged = i
                if stop_at_convergence:
                    break

    verdict, note = decide_verdict(records, converged)
    if converged is None:
        warnings.warn(note)
    suggested = draws.method.refined(1) if verdict == RESAMPLE else None
    logger.info("verdict: %s (%s)", verdict, note)
    return WorkflowReport(records, verdict, converged, ladder.thresholds, method=draws.method,
                          suggested_method=suggested, note=note, sampling_rhs_evals=draws.rhs_evals)


# ----------- corrected estimates
def weighted_quantile(values, weights, q):
    """
    Quantile of the weighted empirical distribution (inverse of the weighted CDF, smallest value whose cumulative
    weight reaches q). Uniform weights give the 'inverted_cdf' quantile of numpy.
    """
    order = np.argsort(values, kind='mergesort')
    values = np.asarray(values)[order]
    cdf = np.cumsum(np.asarray(weights)[order])
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, np.asarray(q) - 1e-10, side='left')
    return values[np.minimum(idx, len(values) - 1)]


def _quantile_mcse(values, weights, p, s_eff):
    """Half width of the interval between the quantiles at p -/+ 1.96 sqrt(p (1-p) / S_eff), divided by 2 x 1.96."""
    half = 1.96 * np.sqrt(p * (1.0 - p) / s_eff)
    lo, hi = weighted_quantile(values, weights, [max(p - half, 0.0), min(p + half, 1.0)])
    return float((hi - lo) / (2 * 1.96))


ESTIMATE_COLUMNS = ('parameter', 'mean', 'mcse_mean', 'q5', 'q50', 'q95', 'mcse_q5', 'mcse_q50', 'mcse_q95')


def corrected_estimates(report,          # type: WorkflowReport
                        draws,           # type: Draws
                        estimands=None,  # type: Dict[str, Callable]
                        ess=None,        # type: Dict[str, float]
                        weights=None     # type: np.ndarray
                        ):
    # type: (...) -> pd.DataFrame
    """
    Importance-corrected estimates of each estimand: self-normalized mean, weighted 5/50/95% quantiles and their
    Monte Carlo standard errors, with effective sample size r_eff * S (or r_eff * ESS when the MCMC effective sample
    size of the estimand is given in `ess`).

    :param report: an accepted report
    :param draws: the draws the report was computed on
    :param estimands: name -> function of a constrained parameter vector. Defaults to every parameter
    :param ess: optional name -> MCMC effective sample size
    :param weights: the smoothed weights, when the report was read from disk
    :return: a DataFrame with columns `parameter,mean,mcse_mean,q5,q50,q95,mcse_q5,mcse_q50,mcse_q95`
    """
    if not report.accepted:
        raise VerdictMismatch(report.verdict)
    if weights is None:
        weights = report.psis.weights
    weights = np.asarray(weights, dtype=float)
    r_eff = report.final.r_eff
    theta = draws.flat_theta()
    if estimands is None:
        estimands = {name: (lambda x, i=i: x[i]) for i, name in enumerate(draws.param_names)}

    rows = []
    for name, phi in estimands.items():
        values = np.array([phi(x) for x in theta], dtype=float)
        s_eff = r_eff * (ess[name] if ess is not None and name in ess else len(values))
        mean = float(np.sum(weights * values) / np.sum(weights))
        var = float(np.sum(weights * (values - mean) ** 2) / np.sum(weights))
        row = dict(parameter=name, mean=mean, mcse_mean=np.sqrt(var / s_eff))
        for p, label in ((0.05, '5'), (0.5, '50'), (0.95, '95')):
            row['q' + label] = float(weighted_quantile(values, weights, p))
            row['mcse_q' + label] = _quantile_mcse(values, weights, p, s_eff)
        rows.append(row)
    return pd.DataFrame(rows, columns=list(ESTIMATE_COLUMNS))
