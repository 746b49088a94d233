import json

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from odecheck import WorkflowReport, RungRecord, SolverSpec
from odecheck.cli import odecheck
from odecheck.utils import ENV_THREADS
from odecheck.workflow import ACCEPT

PLUGIN = """from odecheck.tests.ref_draws import decay_model


def make_model(dataset):
    return decay_model()
"""


@pytest.fixture(autouse=True)
def no_env_threads(monkeypatch):
    monkeypatch.delenv(ENV_THREADS, raising=False)


@pytest.fixture(scope="module")
def sampled(tmp_path_factory):
    """Draws of the decay plugin model sampled with rk4(2), 2 chains x 100 draws"""
    root = tmp_path_factory.mktemp("cli")
    plugin = root / "decay_plugin.py"
    plugin.write_text(PLUGIN)
    out = root / "draws"
    with pytest.MonkeyPatch.context() as mp:
        mp.delenv(ENV_THREADS, raising=False)
        result = CliRunner().invoke(odecheck, ['sample', '--model', str(plugin), '--chains', '2', '--iters', '200',
                                               '--warmup', '100', '--max-depth', '5', '--solver', 'rk4(2)',
                                               '--seed', '3', '--out', str(out)])
    assert result.exit_code == 0, result.output
    return root, out, result


def test_sample(sampled):
    """The sample command writes the draws, their summary and the sampler diagnostics"""
    _, out, result = sampled
    for name in ('chain_1.csv', 'chain_2.csv', 'draws.npz', 'run.json', 'summary.csv', 'diagnostics.csv'):
        assert (out / name).exists()
    assert "Sampled 2 chains x 100 draws of decay with rk4(2)" in result.output
    assert "max_rhat" in result.output
    header = (out / 'chain_1.csv').read_text().splitlines()[0]
    assert header.startswith("chain,iter,k,sigma,lp__,")
    assert json.loads((out / 'run.json').read_text())['method'] == 'rk4(2)'
    assert pd.read_csv(str(out / 'summary.csv'))['parameter'].tolist() == ['k', 'sigma']


def test_check_exhausted_ladder(sampled):
    """A ladder too short to converge gives 'resample' (exit 10) and blocks the estimates"""
    root, out, _ = sampled
    check_out = root / "check_short"
    result = CliRunner().invoke(odecheck, ['check', '-d', str(out), '--ladder', 'rk4(2), rk4(4)',
                                           '--out', str(check_out)])
    assert result.exit_code == 10, result.output
    assert "verdict: resample" in result.output
    assert "suggested sampling method: rk4(4)" in result.output

    report = WorkflowReport.read_json(check_out / 'report.json')
    assert report.converged_rung is None
    assert [str(r.method) for r in report.rungs] == ['rk4(2)', 'rk4(4)']
    ratios = pd.read_csv(str(check_out / 'log_ratios.csv'))
    assert list(ratios.columns) == ['chain', 'iter', 'rk4(2)', 'rk4(4)']
    assert (ratios['rk4(2)'] == 0).all()
    assert len(pd.read_csv(str(check_out / 'rungs.csv'))) == 2

    result = CliRunner().invoke(odecheck, ['estimate', '-d', str(out), '-r', str(check_out / 'report.json')])
    assert result.exit_code == 10
    assert not (out / 'estimates.csv').exists()


def test_check(sampled):
    root, out, _ = sampled
    check_out = root / "check"
    result = CliRunner().invoke(odecheck, ['check', '-d', str(out), '--ladder', 'rk4(2), rk4(4), rk4(8), rk4(16)',
                                           '--out', str(check_out)])
    assert result.exit_code in (0, 10), result.output
    report = WorkflowReport.read_json(check_out / 'report.json')
    assert report.method == SolverSpec.rk4(2)
    assert (result.exit_code == 0) == report.accepted
    if report.accepted:
        weights = pd.read_csv(str(check_out / 'weights.csv'))
        assert len(weights) == 200
        assert weights['weight'].sum() == pytest.approx(1.0)

        result = CliRunner().invoke(odecheck, ['estimate', '-d', str(out), '-r', str(check_out / 'report.json'),
                                               '--out', str(check_out)])
        assert result.exit_code == 0, result.output
        assert pd.read_csv(str(check_out / 'estimates.csv'))['parameter'].tolist() == ['k', 'sigma']


def test_estimate(sampled):
    """An accepted report with uniform weights gives the plain posterior summaries"""
    root, out, _ = sampled
    folder = root / "accepted"
    folder.mkdir()
    rung = RungRecord(SolverSpec.rk4(4), 0.01, 0.0, 0.1, 1.0, 0, 0.1, 10)
    WorkflowReport([rung, rung], ACCEPT, 1, dict(delta_mae=0.05, delta_k=0.02, mae_floor=1e-12),
                   method=SolverSpec.rk4(2)).to_json(folder / 'report.json')
    pd.DataFrame(dict(chain=np.repeat([1, 2], 100), iter=np.tile(np.arange(1, 101), 2),
                      log_weight=np.log(np.full(200, 1 / 200)), weight=np.full(200, 1 / 200))) \
        .to_csv(str(folder / 'weights.csv'), index=False)

    result = CliRunner().invoke(odecheck, ['estimate', '-d', str(out), '-r', str(folder / 'report.json'),
                                           '--out', str(folder)])
    assert result.exit_code == 0, result.output
    estimates = pd.read_csv(str(folder / 'estimates.csv'))
    assert estimates['parameter'].tolist() == ['k', 'sigma']
    k = np.concatenate([pd.read_csv(str(out / name))['k'].values for name in ('chain_1.csv', 'chain_2.csv')])
    assert estimates['mean'][0] == pytest.approx(k.mean(), rel=1e-6)


def test_check_errors(sampled, tmp_path):
    root, out, _ = sampled
    runner = CliRunner()

    result = runner.invoke(odecheck, ['check', '-d', str(out), '--ladder', 'rk4(4)', '--out', str(tmp_path)])
    assert result.exit_code == 2

    result = runner.invoke(odecheck, ['check', '-d', str(out), '--ladder', 'rk4(8), rk4(4)', '--out', str(tmp_path)])
    assert result.exit_code == 2

    result = runner.invoke(odecheck, ['check', '-d', str(out), '--solver', 'rk4(3)', '--out', str(tmp_path)])
    assert result.exit_code == 2
    assert "does not match" in result.output

    result = runner.invoke(odecheck, ['check', '-d', str(tmp_path / 'nothing')])
    assert result.exit_code == 3


@pytest.mark.parametrize("args, message", [(['sample', '--model', 'tmdd'], "dataset"),
                                           (['sample', '--model', 'sir'], "sir"),
                                           (['sample', '--chains', '0'], "chains"),
                                           (['simulate', '--model', 'lotka-volterra'], "no simulator"),
                                           (['print-config', '--solver', 'rk5(1)'], "solver")],
                         ids=str)
def test_usage_errors(args, message, tmp_path):
    result = CliRunner().invoke(odecheck, args + ['--out', str(tmp_path)])
    assert result.exit_code == 2
    assert message in result.output


def test_simulate(tmp_path):
    result = CliRunner().invoke(odecheck, ['simulate', '--model', 'tmdd', '--seed', '4', '--out', str(tmp_path)])
    assert result.exit_code == 0, result.output
    lines = (tmp_path / 'tmdd.csv').read_text().splitlines()
    assert lines[0] == "time,complex"
    assert len(lines) == 16


def test_print_config(tmp_path, monkeypatch):
    """Flags win over the file, which wins over the environment"""
    path = tmp_path / "run.cfg"
    path.write_text("chains = 3\nseed = 9\n")
    monkeypatch.setenv(ENV_THREADS, '5')
    result = CliRunner().invoke(odecheck, ['print-config', '-c', str(path), '--chains', '2', '--solver', 'RK4(3)'])
    assert result.exit_code == 0, result.output
    lines = result.output.splitlines()
    assert "chains = 2" in lines
    assert "seed = 9" in lines
    assert "solver = rk4(3)" in lines
    assert "threads = 5" in lines
    assert "model = lotka-volterra" in lines
