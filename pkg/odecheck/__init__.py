#  Authors: The odecheck contributors
#
#  License: 3-clause BSD, <LICENSE>
from odecheck.ode import OdeSystem, Ivp, SolverSpec, OdeSolution, SolverStats, SolverError, SolverFailure, \
    MaxStepsExceeded, InvalidIvp, solve, solve_fixed, solve_rk45, solve_with_sensitivities, step_explicit_rk, \
    rk45_error_norm, rk45_adapt_step
from odecheck.models import PosteriorModel, OdePosteriorModel, TmddModel, LotkaVolterraModel, Dataset, \
    ParamLayout, ParamVector, PosteriorEvalResult, DatasetError, UnknownModel, load_model, log_prior, \
    log_likelihood, unnorm_log_posterior, simulate_tmdd_data
from odecheck.sampler import SamplerConfig, Draws, SamplerDiagnostics, ConvergenceSummary, InitializationFailure, \
    DegenerateChains, nuts_sample, run_nuts, leapfrog, convergence_summary
from odecheck.psis import LogRatios, GpdFit, PsisResult, TooFewRatios, DegenerateTail, UnfittableTail, \
    AllZeroWeights, compute_log_ratios, gpd_density, gpd_quantile, fit_gpd_tail, pareto_smooth, snis_estimate, \
    relative_efficiency, khat_verdict
from odecheck.workflow import MethodLadder, RungRecord, WorkflowReport, InvalidLadder, LadderTooShort, \
    ShapeMismatch, VerdictMismatch, compute_mae, run_reliability_check, corrected_estimates
from odecheck.config import RunConfig, ConfigError, load_run_config, format_config, parse_config_text
from odecheck.utils import DomainError

try:
    # -- Distribution mode --
    # import from _version.py generated by setuptools_scm during release
    from odecheck._version import version as __version__
except ImportError:
    # -- Source mode --
    __version__ = "0.0.0.dev0"

__all__ = [
    '__version__',
    # submodules
    'dual', 'ode', 'models', 'sampler', 'psis', 'workflow', 'config', 'utils',
    # ode
    'OdeSystem', 'Ivp', 'SolverSpec', 'OdeSolution', 'SolverStats', 'SolverError', 'SolverFailure',
    'MaxStepsExceeded', 'InvalidIvp', 'solve', 'solve_fixed', 'solve_rk45', 'solve_with_sensitivities',
    'step_explicit_rk', 'rk45_error_norm', 'rk45_adapt_step',
    # models
    'PosteriorModel', 'OdePosteriorModel', 'TmddModel', 'LotkaVolterraModel', 'Dataset', 'ParamLayout',
    'ParamVector', 'PosteriorEvalResult', 'DatasetError', 'UnknownModel', 'load_model', 'log_prior',
    'log_likelihood', 'unnorm_log_posterior', 'simulate_tmdd_data',
    # sampler
    'SamplerConfig', 'Draws', 'SamplerDiagnostics', 'ConvergenceSummary', 'InitializationFailure',
    'DegenerateChains', 'nuts_sample', 'run_nuts', 'leapfrog', 'convergence_summary',
    # psis
    'LogRatios', 'GpdFit', 'PsisResult', 'TooFewRatios', 'DegenerateTail', 'UnfittableTail', 'AllZeroWeights',
    'compute_log_ratios', 'gpd_density', 'gpd_quantile', 'fit_gpd_tail', 'pareto_smooth', 'snis_estimate',
    'relative_efficiency', 'khat_verdict',
    # workflow
    'MethodLadder', 'RungRecord', 'WorkflowReport', 'InvalidLadder', 'LadderTooShort', 'ShapeMismatch',
    'VerdictMismatch', 'compute_mae', 'run_reliability_check', 'corrected_estimates',
    # config
    'RunConfig', 'ConfigError', 'load_run_config', 'format_config', 'parse_config_text',
    'DomainError',
]
