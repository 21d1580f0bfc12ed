import json

import numpy as np
import pandas as pd
import pytest

from .diagnostics import (
    FactorReport, format_text, full_report, plot_data, sector_histogram,
    sign_coherence, threshold_components, write_reports,
)
from .exceptions import ModelValidationError
from .models import SECTOR_NAMES, CLASSIFIED_SECTORS, FactorModel, Sector, SectorMap
from .synthgen import SynthSpec, sample_model


def coherent_model(seed: int = 0) -> FactorModel:
    return sample_model(SynthSpec.with_sectors({1: 6, 6: 5, 8: 7}, n_unclassified=2, seed=seed))


def sectors_of(model: FactorModel) -> SectorMap:
    assignments = {}
    for stock_id in model.stock_ids:
        prefix = stock_id.split('_')[0]
        assignments[stock_id] = Sector.UNCLASSIFIED if prefix == 'U' else Sector(int(prefix[1:]))
    return SectorMap(assignments)


def negate_column(model: FactorModel, k: int) -> FactorModel:
    loadings = np.array(model.loadings)
    loadings[:, k] = -loadings[:, k]
    return FactorModel(loadings, model.psi, model.mask, model.factor_labels, model.stock_ids)


class TestThresholdComponents:
    def test_small_entry_dropped(self):
        selected = threshold_components([1.0, 0.05, -0.2], ['a', 'b', 'c'], 0.10)
        assert selected == [('a', 1.0), ('c', -0.2)]

    def test_threshold_one_keeps_ties(self):
        selected = threshold_components([0.5, -0.9, 0.9, 0.1], ['a', 'b', 'c', 'd'], 1.0)
        assert [s for s, _ in selected] == ['b', 'c']

    @pytest.mark.parametrize('seed', range(20))
    def test_matches_linear_scan(self, seed):
        rng = np.random.default_rng(seed)
        column = rng.normal(size=int(rng.integers(1, 30)))
        ids = [f'X{j:02d}' for j in range(column.size)]
        threshold = float(rng.uniform(0.01, 1.0))
        peak = max(abs(v) for v in column)
        expected = {ids[j] for j, v in enumerate(column) if abs(v) >= threshold * peak}
        selected = threshold_components(column, ids, threshold)
        assert {s for s, _ in selected} == expected
        magnitudes = [abs(v) for _, v in selected]
        assert magnitudes == sorted(magnitudes, reverse=True)

    def test_monotone_in_threshold(self):
        column = np.random.default_rng(1).normal(size=25)
        ids = [f'X{j:02d}' for j in range(25)]
        sizes = [len(threshold_components(column, ids, t)) for t in np.linspace(0.05, 1.0, 20)]
        assert sizes == sorted(sizes, reverse=True)

    @pytest.mark.parametrize('threshold', [0.0, 1.5])
    def test_rejects_threshold(self, threshold):
        with pytest.raises(ModelValidationError):
            threshold_components([1.0], ['a'], threshold)

    def test_rejects_zero_column(self):
        with pytest.raises(ModelValidationError):
            threshold_components([0.0, 0.0], ['a', 'b'])


class TestSectorHistogram:
    def test_counts(self):
        sectors = SectorMap({'A': 1, 'B': 1, 'C': 6})
        histogram = sector_histogram([('A', 0.4), ('B', -0.3), ('C', 0.2)], sectors)
        assert histogram == {Sector.FINANCE: 2, Sector.ENERGY: 1}

    def test_empty(self):
        assert sector_histogram([], SectorMap({'A': 1})) == {}

    def test_permutation_invariant(self):
        sectors = SectorMap({'A': 1, 'B': 2, 'C': 1, 'D': 0})
        selected = [('A', 1.0), ('B', 0.5), ('C', -0.2), ('D', 0.3)]
        assert sector_histogram(selected, sectors) == sector_histogram(selected[::-1], sectors)

    def test_one_sector_model_concentrated(self):
        model = sample_model(SynthSpec.with_sectors({9: 8}, seed=2))
        reports = full_report(model, sectors_of(model))
        assert reports[8].sector_histogram == {Sector.BASIC_INDUSTRIES: 8}


class TestSignCoherence:
    def test_unanimous_negative(self):
        assert sign_coherence([-1.0, -2.0, -0.5]) == (1.0, -1)

    def test_tie(self):
        assert sign_coherence([1.0, -1.0]) == (0.5, None)

    def test_three_of_four(self):
        assert sign_coherence([3.0, 2.0, -1.0, 4.0]) == (0.75, 1)

    def test_zeros_ignored(self):
        assert sign_coherence([('a', 0.0), ('b', 2.0)]) == (1.0, 1)

    def test_no_nonzero(self):
        with pytest.raises(ModelValidationError):
            sign_coherence([0.0])


class TestFullReport:
    def test_one_report_per_factor(self):
        model = coherent_model()
        reports = full_report(model, sectors_of(model))
        assert len(reports) == 13
        assert [r.label for r in reports[:11]] == [SECTOR_NAMES[s] for s in CLASSIFIED_SECTORS]
        assert [r.factor_index for r in reports] == list(range(1, 14))

    def test_coherent_model(self):
        model = coherent_model(seed=4)
        reports = full_report(model, sectors_of(model))
        for k in (0, 5, 7):
            assert reports[k].sign_coherence == 1.0
            assert reports[k].dominant_sign in (1, -1)

    def test_empty_support(self):
        model = coherent_model()
        report = full_report(model, sectors_of(model))[1]
        assert report.support_size == 0
        assert report.selected_components == []
        assert report.sign_coherence is None and report.dominant_sign is None

    def test_sign_flip(self):
        model = coherent_model(seed=1)
        sectors = sectors_of(model)
        before = full_report(model, sectors)
        after = full_report(negate_column(model, 11), sectors)
        assert after[11].sign_coherence == before[11].sign_coherence
        if before[11].dominant_sign is None:
            assert after[11].dominant_sign is None
        else:
            assert after[11].dominant_sign == -before[11].dominant_sign
        assert after[0].dominant_sign == before[0].dominant_sign

    def test_support_scope(self):
        model = coherent_model(seed=2)
        reports = full_report(model, sectors_of(model), threshold=1.0, scope='support')
        market = reports[12]
        assert len(market.selected_components) == 1
        column = model.loadings[:, 12]
        positive, negative = np.sum(column > 0), np.sum(column < 0)
        assert market.sign_coherence == pytest.approx(max(positive, negative) / (positive + negative))

    def test_unknown_scope(self):
        model = coherent_model()
        with pytest.raises(ModelValidationError):
            full_report(model, sectors_of(model), scope='everything')


class TestOutputs:
    def test_to_dict_uses_codes(self):
        report = FactorReport(
            factor_index=1, label='FINANCE',
            selected_components=[('A', 0.5)],
            sector_histogram={Sector.FINANCE: 1},
            sign_coherence=1.0, dominant_sign=1, support_size=3,
        )
        data = report.to_dict()
        assert data['sector_histogram'] == {'1': 1}
        assert data['selected_components'] == [{'stock_id': 'A', 'loading': 0.5}]

    def test_text_report_is_aligned(self):
        model = coherent_model()
        text = format_text(full_report(model, sectors_of(model)), 0.10)
        rows = text.splitlines()[2:]
        assert len(rows) == 14
        assert rows[0].index('label') == rows[1].index('FINANCE')

    def test_plot_data_columns(self):
        model = coherent_model()
        frame = plot_data(model, sectors_of(model), 6)
        assert list(frame.columns) == ['stock_id', 'sector_code', 'loading']
        assert set(frame['sector_code']) == {'6'}
        assert len(frame) == 5

    def test_write_reports(self, tmp_path):
        model = coherent_model()
        sectors = sectors_of(model)
        reports = full_report(model, sectors)
        written = write_reports(reports, model, sectors, tmp_path, 0.10)
        assert len(written) == 2 + 13

        data = json.loads((tmp_path / 'report.json').read_text(encoding='utf-8'))
        assert data['threshold'] == 0.10
        assert len(data['factors']) == 13
        assert 'coherence_definition' in data

        market = pd.read_csv(tmp_path / 'plot_data' / 'factor_12_mkt1.csv', dtype={'sector_code': str},
                             float_precision='round_trip')
        assert len(market) == model.n
        np.testing.assert_array_equal(market['loading'].to_numpy(), model.loadings[:, 11])
