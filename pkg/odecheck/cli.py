#  Authors: The odecheck contributors
#
#  License: 3-clause BSD, <LICENSE>
"""
The `odecheck` command line: simulate data, sample a posterior with a cheap solver, check the draws against a ladder of
more accurate solvers and compute corrected estimates.

Exit codes: 0 success (or 'accept' verdict), 2 usage or configuration error, 3 runtime failure, 10 'resample' verdict.
"""
import logging
import sys
import time

import numpy as np
import pandas as pd

try:
    import click
except ImportError as e:
    raise Exception("`click` is required for the `odecheck` command line. Please `pip install click`. Caught: %r" % e)

try:
    from pathlib import Path
except ImportError:
    from pathlib2 import Path  # python 2

from odecheck.config import ConfigError, load_run_config, format_config, KEYS
from odecheck.models import load_model, simulate_tmdd_data, UnknownModel, DatasetError, TMDD, LYNX_HARE_CSV, \
    REFERENCE_SPEC
from odecheck.sampler import nuts_sample, convergence_summary, Draws, InitializationFailure, DegenerateChains
from odecheck.workflow import run_reliability_check, corrected_estimates, WorkflowReport, LadderTooShort, \
    InvalidLadder, VerdictMismatch

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_RUNTIME = 3
EXIT_RESAMPLE = 10

REPORT_JSON = 'report.json'
WEIGHTS_CSV = 'weights.csv'


@click.group()
@click.option('-v', '--verbose', count=True, help="Increase logging verbosity (-v info, -vv debug)")
def odecheck(verbose):
    """
    Bayesian ODE inference with a solver reliability check. To get help on each command use:

        odecheck <cmd> --help

    """
    level = logging.WARNING if verbose == 0 else (logging.INFO if verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# ----------- options shared by the commands, one per configuration key
_OPTIONS = {
    'model': click.option('--model', default=None, help="tmdd, lotka-volterra or a plugin .py file"),
    'dataset': click.option('--dataset', default=None, help="Dataset CSV (the bundled one for lotka-volterra)"),
    'chains': click.option('--chains', type=int, default=None, help="Number of chains. Default 4"),
    'iterations': click.option('--iterations', '--iters', 'iterations', type=int, default=None,
                               help="Iterations per chain, warmup included. Default 4000"),
    'warmup': click.option('--warmup', type=int, default=None, help="Warmup iterations. Default iterations // 2"),
    'stepsize': click.option('--stepsize', type=float, default=None, help="Initial step size. Default 0.1"),
    'target_accept': click.option('--target-accept', 'target_accept', type=float, default=None,
                                  help="Target acceptance statistic. Default 0.8"),
    'max_depth': click.option('--max-depth', 'max_depth', type=int, default=None, help="Max tree depth. Default 10"),
    'seed': click.option('--seed', type=int, default=None, help="Master seed. Default 1"),
    'solver': click.option('--solver', default=None, help="Sampling method, e.g. 'rk45(1e-3)', 'rk4(2)'"),
    'ladder': click.option('--ladder', default=None, help="'default' or a comma separated list of methods"),
    'delta_mae': click.option('--delta-mae', 'delta_mae', type=float, default=None, help="Default 0.05"),
    'delta_k': click.option('--delta-k', 'delta_k', type=float, default=None, help="Default 0.02"),
    'mae_floor': click.option('--mae-floor', 'mae_floor', type=float, default=None, help="Default 1e-12"),
    'full_ladder': click.option('--full-ladder/--stop-at-convergence', 'full_ladder', default=None,
                                help="Evaluate all rungs even after convergence"),
    'sigma': click.option('--sigma', type=float, default=None, help="Observation noise. Default 0.5"),
    'threads': click.option('--threads', type=int, default=None, help="Worker threads. Default 1 or "
                                                                        "$ODECHECK_THREADS"),
    'out': click.option('--out', default=None, help="Output directory. Default 'odecheck-out'"),
    'progress': click.option('--progress/--no-progress', 'progress', default=None, help="Show progress bars"),
}


def run_options(*keys):
    """Adds `--config` and one option per configuration key in `keys`."""
    def decorate(f):
        for key in reversed(keys):
            f = _OPTIONS[key](f)
        return click.option('-c', '--config', 'config_file', default=None,
                            type=click.Path(exists=True, dir_okay=False), help="Configuration file")(f)
    return decorate


def _load_config(config_file, options):
    try:
        return load_run_config(config_file, {k: v for k, v in options.items() if k in KEYS})
    except ConfigError as e:
        raise click.UsageError(str(e))


def _fail(msg, code):
    click.echo("Error: %s" % msg, err=True)
    sys.exit(code)


def _load_model(model, dataset):
    try:
        return load_model(model, dataset)
    except (UnknownModel, DatasetError) as e:
        raise click.UsageError(str(e))
    except (OSError, ValueError) as e:
        raise click.UsageError("key 'dataset': %s" % e)


# ----------- commands
@odecheck.command(name="simulate")
@run_options('model', 'seed', 'sigma', 'out')
def cmd_simulate(config_file, **options):
    """
    Simulates a TMDD dataset with the reference solver and writes it as `<out>/tmdd.csv`.
    """
    config = _load_config(config_file, options)
    if config.model != TMDD:
        raise click.UsageError("no simulator for model '%s'; the bundled dataset is at %s"
                               % (config.model, LYNX_HARE_CSV))
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / 'tmdd.csv'
    simulate_tmdd_data(config.seed, sigma=config.sigma).to_csv(path)
    click.echo("Simulated %s data with reference solver %s (seed %s, sigma %r): %s"
               % (TMDD, REFERENCE_SPEC, config.seed, config.sigma, path))


@odecheck.command(name="sample")
@run_options('model', 'dataset', 'chains', 'iterations', 'warmup', 'stepsize', 'target_accept', 'max_depth', 'seed',
             'solver', 'threads', 'out', 'progress')
def cmd_sample(config_file, **options):
    """
    Samples the posterior with the configured solver and writes the draws, `summary.csv` and `diagnostics.csv`.
    """
    config = _load_config(config_file, options)
    model = _load_model(config.model, config.dataset)
    try:
        sampler_config = config.sampler_config()
    except ValueError as e:
        raise click.UsageError(str(e))
    spec = config.solver_spec
    dataset = None if config.dataset is None else str(Path(config.dataset).resolve())
    model_source = config.model if config.model == model.name else str(Path(config.model).resolve())

    t_start = time.time()
    try:
        draws, diagnostics = nuts_sample(model, spec, sampler_config,
                                         meta=dict(model_source=model_source, dataset=dataset))
    except InitializationFailure as e:
        _fail(str(e), EXIT_RUNTIME)
    seconds = time.time() - t_start

    out = Path(config.out)
    draws.save(out)
    diagnostics.to_frame().to_csv(str(out / 'diagnostics.csv'), index=False)
    try:
        summary = convergence_summary(draws)
    except DegenerateChains as e:
        _fail(str(e), EXIT_RUNTIME)
    summary.to_frame().to_csv(str(out / 'summary.csv'), index=False)

    agg = summary.aggregates()
    click.echo("Sampled %s chains x %s draws of %s with %s in %.1fs (%s rhs evaluations)"
               % (draws.n_chains, draws.n_draws, model.name, spec, seconds, draws.rhs_evals))
    click.echo("max_rhat = %.4f, min_ess_bulk = %.1f, min_ess_tail = %.1f, divergent = %.2f%%"
               % (agg['max_rhat'], agg['min_ess_bulk'], agg['min_ess_tail'], 100 * diagnostics.divergence_fraction))
    click.echo("Draws written to %s" % out)


def _read_draws(folder):
    try:
        return Draws.load(folder)
    except (OSError, KeyError, ValueError) as e:
        _fail("cannot read draws in %s: %s" % (folder, e), EXIT_RUNTIME)


@odecheck.command(name="check")
@click.option('-d', '--draws', 'draws_dir', default=None, help="Draws directory. Default: the configured out")
@run_options('model', 'dataset', 'solver', 'ladder', 'delta_mae', 'delta_k', 'mae_floor', 'full_ladder', 'threads',
             'out', 'progress')
def cmd_check(draws_dir, config_file, **options):
    """
    Runs the reliability check of the draws against the method ladder. Writes `report.json`, `rungs.csv`,
    `weights.csv` and `log_ratios.csv`. Exits with 0 on 'accept' and 10 on 'resample'.
    """
    config = _load_config(config_file, options)
    draws_dir = Path(draws_dir if draws_dir is not None else config.out)
    draws = _read_draws(draws_dir)
    if draws.method is None:
        _fail("the draws in %s do not record their sampling method" % draws_dir, EXIT_USAGE)
    if 'solver' in config.explicit_keys and config.solver_spec != draws.method:
        _fail("configured solver %s does not match the sampling method %s recorded with the draws"
              % (config.solver_spec, draws.method), EXIT_USAGE)

    model_source = config.model if 'model' in config.explicit_keys else draws.meta.get('model_source', config.model)
    dataset = config.dataset if 'dataset' in config.explicit_keys else draws.meta.get('dataset')
    model = _load_model(model_source, dataset)
    try:
        ladder = config.method_ladder(draws.method)
    except (LadderTooShort, InvalidLadder, ValueError) as e:
        _fail(str(e), EXIT_USAGE)

    report = run_reliability_check(draws, model, ladder, threads=config.threads,
                                   stop_at_convergence=not config.full_ladder, progress=config.progress)

    out = Path(config.out) if 'out' in config.explicit_keys else draws_dir
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / REPORT_JSON)
    report.rungs_frame().to_csv(str(out / 'rungs.csv'), index=False)
    chain = np.repeat(np.arange(1, draws.n_chains + 1), draws.n_draws)
    it = np.tile(np.arange(1, draws.n_draws + 1), draws.n_chains)
    final = report.final
    if final.psis is not None:
        pd.DataFrame(dict(chain=chain, iter=it, log_weight=final.psis.log_weights, weight=final.psis.weights)) \
            .to_csv(str(out / WEIGHTS_CSV), index=False)
    ratios = pd.DataFrame(dict(chain=chain, iter=it))
    for r in report.rungs:
        ratios[str(r.method)] = r.ratios.log_ratios
    ratios.to_csv(str(out / 'log_ratios.csv'), index=False)

    click.echo(report.rungs_frame()[['method', 'mae', 'max_ratio', 'khat', 'r_eff', 'failed_draws']]
               .to_string(index=False))
    click.echo("workflow rhs evaluations: %s (sampling: %s)" % (report.workflow_rhs_evals, report.sampling_rhs_evals))
    click.echo("verdict: %s (%s)" % (report.verdict, report.note))
    if not report.accepted:
        click.echo("suggested sampling method: %s" % report.suggested_method)
        sys.exit(EXIT_RESAMPLE)


@odecheck.command(name="estimate")
@click.option('-d', '--draws', 'draws_dir', default=None, help="Draws directory. Default: the configured out")
@click.option('-r', '--report', 'report_file', default=None, help="Report file. Default: <draws>/report.json")
@run_options('out')
def cmd_estimate(draws_dir, report_file, config_file, **options):
    """
    Computes importance-corrected posterior means, 5/50/95% quantiles and their standard errors into `estimates.csv`.
    Exits with 10 when the report verdict is 'resample'.
    """
    config = _load_config(config_file, options)
    draws_dir = Path(draws_dir if draws_dir is not None else config.out)
    report_file = Path(report_file) if report_file is not None else draws_dir / REPORT_JSON
    try:
        report = WorkflowReport.read_json(report_file)
    except (OSError, KeyError, ValueError) as e:
        _fail("cannot read report %s: %s" % (report_file, e), EXIT_RUNTIME)
    if not report.accepted:
        _fail(str(VerdictMismatch(report.verdict)), EXIT_RESAMPLE)
    draws = _read_draws(draws_dir)
    try:
        weights = pd.read_csv(str(report_file.parent / WEIGHTS_CSV))['weight'].values
    except (OSError, KeyError) as e:
        _fail("cannot read the weights next to %s: %s" % (report_file, e), EXIT_RUNTIME)
    try:
        summary = convergence_summary(draws)
        ess = dict(zip(summary.names, summary.ess_bulk))
    except (DegenerateChains, ValueError):
        ess = None

    estimates = corrected_estimates(report, draws, ess=ess, weights=weights)
    out = Path(config.out) if 'out' in config.explicit_keys else draws_dir
    out.mkdir(parents=True, exist_ok=True)
    estimates.to_csv(str(out / 'estimates.csv'), index=False)
    click.echo(estimates.to_string(index=False))


@odecheck.command(name="print-config")
@run_options(*KEYS)
def cmd_print_config(config_file, **options):
    """
    Prints the effective configuration in the configuration file format.
    """
    config = _load_config(config_file, options)
    click.echo(format_config(config), nl=False)


if __name__ == '__main__':
    odecheck()
