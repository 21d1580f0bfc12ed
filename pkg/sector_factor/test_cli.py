import json

import numpy as np
import pandas as pd
import pytest

from . import cli, config
from .exceptions import NumericalError
from .storage import RunManifest, load_model


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture
def simulated(tmp_path):
    """20 只股票、3 个行业的合成数据目录"""
    out = tmp_path / 'sim'
    assert run('simulate', '--out', out, '--seed', 7, '--p', 400, '--sector-counts', '1:8,6:6,8:6') == 0
    return out


class TestSimulate:
    def test_writes_files(self, simulated):
        for name in ('prices.csv', 'sectors.csv', 'truth_model.json', 'manifest.json'):
            assert (simulated / name).exists()
        manifest = RunManifest.load(simulated / 'manifest.json')
        assert manifest.command == 'simulate'
        assert manifest.seed == 7
        assert manifest.flags['spec']['p'] == 400

    def test_same_seed_same_files(self, tmp_path):
        for name in ('a', 'b'):
            assert run('simulate', '--out', tmp_path / name, '--seed', 7, '--p', 50) == 0
        for name in ('prices.csv', 'sectors.csv', 'truth_model.json'):
            assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()

    def test_two_sectors_of_five(self, tmp_path):
        assert run('simulate', '--out', tmp_path, '--p', 20, '--sector-counts', '3:5,10:5') == 0
        frame = pd.read_csv(tmp_path / 'sectors.csv', dtype=str)
        assert len(frame) == 10
        assert set(frame['sector_code']) == {'3', '10'}

    def test_unclassified_and_incoherent(self, tmp_path):
        assert run('simulate', '--out', tmp_path, '--p', 20, '--sector-counts', '2:6',
                   '--n-unclassified', 2, '--incoherent') == 0
        frame = pd.read_csv(tmp_path / 'sectors.csv', dtype=str)
        assert (frame['sector_code'] == 'UNCLASSIFIED').sum() == 2

    def test_invalid_generator_flags(self, tmp_path):
        assert run('simulate', '--out', tmp_path, '--p', 1) == cli.EXIT_USAGE
        assert run('simulate', '--out', tmp_path, '--sector-counts', '12:3') == cli.EXIT_USAGE


class TestFit:
    def test_protocol_run(self, simulated, tmp_path):
        out = tmp_path / 'fit'
        code = run('fit', '--m', 13, '--iters', 100, simulated / 'prices.csv', simulated / 'sectors.csv',
                   '--out', out)
        assert code == 0
        model = load_model(out / 'model.json')
        assert model.m == 13
        assert model.mask.structured
        assert np.all(model.loadings[~model.mask.pattern] == 0.0)

        trace = pd.read_csv(out / 'trace.csv', float_precision='round_trip')
        assert len(trace) == 100

        manifest = RunManifest.load(out / 'manifest.json')
        assert manifest.command == 'fit'
        assert manifest.seed == 0
        assert manifest.iterations_run == 100
        assert manifest.final_loglik == trace['loglik'].iloc[-1]
        assert set(manifest.inputs) == {str(simulated / 'prices.csv'), str(simulated / 'sectors.csv')}
        assert manifest.tool_version == config.VERSION
        assert manifest.flags['fit_config']['max_iterations'] == 100

    def test_standard_flag(self, simulated, tmp_path):
        out = tmp_path / 'fit'
        assert run('fit', '--standard', '--m', 13, '--iters', 5,
                   simulated / 'prices.csv', simulated / 'sectors.csv', '--out', out) == 0
        model = load_model(out / 'model.json')
        assert model.mask.pattern.all()
        assert model.factor_labels[0] == 'F1'
        data = json.loads((out / 'model.json').read_text())
        assert 0 not in data['mask']

    def test_byte_identical_reruns(self, simulated, tmp_path, monkeypatch):
        args = ['fit', '--iters', 15, '--seed', 3, simulated / 'prices.csv', simulated / 'sectors.csv']
        assert run(*args, '--out', tmp_path / 'a') == 0
        monkeypatch.setenv(config.RUNTIME['threads_env'], '4')
        assert run(*args, '--out', tmp_path / 'b') == 0
        assert (tmp_path / 'a' / 'model.json').read_bytes() == (tmp_path / 'b' / 'model.json').read_bytes()
        assert (tmp_path / 'a' / 'trace.csv').read_bytes() == (tmp_path / 'b' / 'trace.csv').read_bytes()

    def test_tol_and_window(self, simulated, tmp_path):
        out = tmp_path / 'fit'
        assert run('fit', '--iters', 500, '--tol', 1e-4, '--start', '2000-02-01', '--end', '2000-12-29',
                   '--drop-unclassified', simulated / 'prices.csv', simulated / 'sectors.csv', '--out', out) == 0
        manifest = RunManifest.load(out / 'manifest.json')
        assert manifest.converged_by_tol
        assert manifest.iterations_run < 500
        assert manifest.flags['start'] == '2000-02-01'

    @pytest.mark.parametrize('flags', [
        ['--m', '11'],
        ['--iters', '0'],
        ['--on-missing', 'skip'],
        ['--demean', 'maybe'],
        ['--start', '01/02/2000'],
    ])
    def test_invalid_flags(self, simulated, tmp_path, flags):
        code = run('fit', *flags, simulated / 'prices.csv', simulated / 'sectors.csv', '--out', tmp_path)
        assert code == cli.EXIT_USAGE

    def test_missing_input(self, simulated, tmp_path):
        code = run('fit', tmp_path / 'absent.csv', simulated / 'sectors.csv', '--out', tmp_path / 'fit')
        assert code == cli.EXIT_DATA

    def test_missing_price_error_mode(self, simulated, tmp_path):
        prices = tmp_path / 'prices.csv'
        lines = (simulated / 'prices.csv').read_text().splitlines()
        cells = lines[5].split(',')
        cells[3] = ''
        lines[5] = ','.join(cells)
        prices.write_text('\n'.join(lines) + '\n')
        args = ['fit', '--iters', 2, prices, simulated / 'sectors.csv']
        assert run(*args, '--on-missing', 'error', '--out', tmp_path / 'a') == cli.EXIT_DATA
        assert run(*args, '--out', tmp_path / 'b') == 0
        manifest = RunManifest.load(tmp_path / 'b' / 'manifest.json')
        assert len(manifest.ingest['dropped']) == 1

    def test_numerical_failure(self, simulated, tmp_path, monkeypatch):
        def explode(self, panel, mask):
            raise NumericalError('B 不是正定矩阵', iteration=3)

        monkeypatch.setattr(cli.EMEngine, 'fit', explode)
        code = run('fit', simulated / 'prices.csv', simulated / 'sectors.csv', '--out', tmp_path / 'fit')
        assert code == cli.EXIT_NUMERICAL


class TestReport:
    def test_truth_model_is_coherent(self, simulated, tmp_path):
        out = tmp_path / 'report'
        assert run('report', simulated / 'truth_model.json', simulated / 'sectors.csv', '--out', out) == 0
        data = json.loads((out / 'report.json').read_text(encoding='utf-8'))
        assert data['threshold'] == 0.10
        for index in (1, 6, 8):
            factor = data['factors'][index - 1]
            assert factor['sign_coherence'] == 1.0
        assert (out / 'report.txt').exists()
        assert len(list((out / 'plot_data').glob('*.csv'))) == 13

    def test_threshold_one(self, simulated, tmp_path):
        out = tmp_path / 'report'
        assert run('report', simulated / 'truth_model.json', simulated / 'sectors.csv',
                   '--threshold', 1.0, '--out', out) == 0
        data = json.loads((out / 'report.json').read_text(encoding='utf-8'))
        for factor in data['factors']:
            if factor['support_size']:
                assert len(factor['selected_components']) == 1

    def test_invalid_threshold(self, simulated, tmp_path):
        code = run('report', simulated / 'truth_model.json', simulated / 'sectors.csv', '--threshold', 0)
        assert code == cli.EXIT_USAGE

    def test_bad_model_file(self, simulated, tmp_path):
        model = tmp_path / 'model.json'
        model.write_text('[]', encoding='utf-8')
        assert run('report', model, simulated / 'sectors.csv', '--out', tmp_path / 'r') == cli.EXIT_DATA


def test_simulate_fit_report_pipeline(simulated, tmp_path):
    fit_dir = tmp_path / 'fit'
    report_dir = tmp_path / 'report'
    assert run('fit', '--iters', 30, simulated / 'prices.csv', simulated / 'sectors.csv', '--out', fit_dir) == 0
    assert run('report', fit_dir / 'model.json', simulated / 'sectors.csv', '--coherence-scope', 'support',
               '--out', report_dir) == 0
    manifest = RunManifest.load(report_dir / 'manifest.json')
    assert manifest.command == 'report'
    assert 'report.json' in manifest.outputs
    data = json.loads((report_dir / 'report.json').read_text(encoding='utf-8'))
    assert all(f['coherence_scope'] == 'support' for f in data['factors'])


def test_requires_subcommand():
    assert run() == cli.EXIT_USAGE
