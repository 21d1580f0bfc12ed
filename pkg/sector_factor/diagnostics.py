from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
import json
import logging
import re

import numpy as np
import pandas as pd

from . import config
from .exceptions import ModelValidationError
from .models import FactorModel, Sector, SectorMap

logger = logging.getLogger(__name__)

COHERENCE_SCOPES = ('selected', 'support')

COHERENCE_DEFINITION = (
    'sign_coherence = max(#正, #负) / (#正 + #负)，统计范围内的非零分量各计一次；'
    '该指标是本工具对“同一行业分量同号”现象的量化定义'
)

Component = Tuple[str, float]


@dataclass
class FactorReport:
    """单个因子的可解释性报告"""
    factor_index: int                     # 从1开始
    label: str
    selected_components: List[Component] = field(default_factory=list)
    sector_histogram: Dict[Sector, int] = field(default_factory=dict)
    sign_coherence: Optional[float] = None
    dominant_sign: Optional[int] = None
    support_size: int = 0
    scope: str = config.REPORT['coherence_scope']

    def to_dict(self) -> Dict:
        return {
            'factor_index': self.factor_index,
            'label': self.label,
            'support_size': self.support_size,
            'selected_components': [
                {'stock_id': s, 'loading': float(v)} for s, v in self.selected_components
            ],
            'sector_histogram': {sector.code: count for sector, count in self.sector_histogram.items()},
            'sign_coherence': self.sign_coherence,
            'dominant_sign': self.dominant_sign,
            'coherence_scope': self.scope,
        }


def threshold_components(lambda_column: Sequence[float], stock_ids: Sequence[str],
                         threshold: float = config.REPORT['threshold']) -> List[Component]:
    """选出 |λ_j| >= threshold·max|λ| 的分量，按 |λ| 降序、代码升序排列"""
    column = np.asarray(lambda_column, dtype=float)
    if column.shape != (len(stock_ids),):
        raise ModelValidationError(f'载荷列长度 {column.shape} 与股票数 {len(stock_ids)} 不一致')
    if not 0 < threshold <= 1:
        raise ModelValidationError(f'阈值必须在 (0, 1] 内: {threshold}')
    magnitudes = np.abs(column)
    peak = magnitudes.max() if column.size else 0.0
    if peak == 0.0:
        raise ModelValidationError('载荷列全为零，无法筛选分量')

    keep = np.flatnonzero(magnitudes >= threshold * peak)
    selected = [(stock_ids[j], float(column[j])) for j in keep]
    selected.sort(key=lambda item: (-abs(item[1]), item[0]))
    return selected


def sector_histogram(selected: Iterable[Component], sectors: SectorMap) -> Dict[Sector, int]:
    """统计所选分量的行业分布（含 UNCLASSIFIED）"""
    counts: Dict[Sector, int] = {}
    for stock_id, _ in selected:
        sector = sectors.sector_of(stock_id)
        counts[sector] = counts.get(sector, 0) + 1
    return dict(sorted(counts.items()))


def _loading_values(selected: Iterable) -> np.ndarray:
    values = [item[1] if isinstance(item, tuple) else item for item in selected]
    return np.asarray(values, dtype=float)


def sign_coherence(selected: Iterable) -> Tuple[float, Optional[int]]:
    """多数符号所占比例及多数符号（平局为 None）；精确为零的分量不计"""
    values = _loading_values(selected)
    positive = int(np.sum(values > 0))
    negative = int(np.sum(values < 0))
    total = positive + negative
    if total == 0:
        raise ModelValidationError('没有非零分量，无法计算符号一致性')
    if positive > negative:
        dominant = 1
    elif negative > positive:
        dominant = -1
    else:
        dominant = None
    return max(positive, negative) / total, dominant


def full_report(model: FactorModel, sectors: SectorMap,
                threshold: float = config.REPORT['threshold'],
                scope: str = config.REPORT['coherence_scope']) -> List[FactorReport]:
    """逐个因子生成报告；每列只在其模式支撑集上统计"""
    if scope not in COHERENCE_SCOPES:
        raise ModelValidationError(f'scope 必须是 {COHERENCE_SCOPES} 之一: {scope!r}')
    if model.stock_ids is None:
        raise ModelValidationError('模型缺少股票代码，无法生成报告')

    reports = []
    for k in range(model.m):
        support = np.flatnonzero(model.mask.pattern[:, k])
        ids = [model.stock_ids[j] for j in support]
        column = model.loadings[support, k]
        report = FactorReport(
            factor_index=k + 1,
            label=model.factor_labels[k],
            support_size=len(support),
            scope=scope,
        )
        if column.size and np.any(column != 0.0):
            report.selected_components = threshold_components(column, ids, threshold)
            report.sector_histogram = sector_histogram(report.selected_components, sectors)
            if scope == 'selected':
                pool = report.selected_components
            else:
                pool = [(s, float(v)) for s, v in zip(ids, column) if v != 0.0]
            report.sign_coherence, report.dominant_sign = sign_coherence(pool)
        else:
            logger.debug(f'因子 {k + 1}（{report.label}）没有非零分量')
        reports.append(report)
    return reports


def reports_to_dict(reports: Sequence[FactorReport], threshold: float) -> Dict:
    return {
        'threshold': threshold,
        'coherence_definition': COHERENCE_DEFINITION,
        'factors': [r.to_dict() for r in reports],
    }


def format_text(reports: Sequence[FactorReport], threshold: float) -> str:
    """对齐列的文本报告"""
    rows = [('#', 'label', 'support', 'selected', 'coherence', 'sign', 'top sectors')]
    for r in reports:
        top = sorted(r.sector_histogram.items(), key=lambda kv: (-kv[1], int(kv[0])))[:3]
        rows.append((
            str(r.factor_index),
            r.label,
            str(r.support_size),
            str(len(r.selected_components)),
            '-' if r.sign_coherence is None else f'{r.sign_coherence:.3f}',
            {1: '+', -1: '-', None: '='}[r.dominant_sign] if r.sign_coherence is not None else '-',
            ' '.join(f'{s.code}:{c}' for s, c in top) or '-',
        ))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = [
        f'# threshold = {threshold}',
        f'# {COHERENCE_DEFINITION}',
    ]
    for row in rows:
        lines.append('  '.join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
    return '\n'.join(lines) + '\n'


def plot_data(model: FactorModel, sectors: SectorMap, factor_index: int) -> pd.DataFrame:
    """某个因子支撑集上的绘图数据：stock_id, sector_code, loading"""
    k = factor_index - 1
    support = np.flatnonzero(model.mask.pattern[:, k])
    ids = [model.stock_ids[j] for j in support]
    return pd.DataFrame({
        'stock_id': ids,
        'sector_code': [sectors.sector_of(s).code for s in ids],
        'loading': model.loadings[support, k],
    })


def _slug(label: str) -> str:
    return re.sub(r'[^A-Za-z0-9]+', '_', label).strip('_').lower()


def write_reports(reports: Sequence[FactorReport], model: FactorModel, sectors: SectorMap,
                  out_dir: Union[str, Path], threshold: float) -> List[Path]:
    """写出 JSON 报告、文本报告与每个因子的绘图数据 CSV"""
    out_dir = Path(out_dir)
    plot_dir = out_dir / config.REPORT['plot_dir']
    plot_dir.mkdir(parents=True, exist_ok=True)

    json_path = out_dir / config.REPORT['json_filename']
    with open(json_path, 'w', encoding='utf-8') as f:
        json.dump(reports_to_dict(reports, threshold), f, indent=2, ensure_ascii=False)
        f.write('\n')

    text_path = out_dir / config.REPORT['text_filename']
    text_path.write_text(format_text(reports, threshold), encoding='utf-8')

    written = [json_path, text_path]
    for report in reports:
        path = plot_dir / f'factor_{report.factor_index:02d}_{_slug(report.label)}.csv'
        plot_data(model, sectors, report.factor_index).to_csv(
            path, index=False, float_format=config.PIPELINE['float_format'], lineterminator='\n'
        )
        written.append(path)
    logger.info(f'已写出报告: {json_path}, {text_path}, 绘图数据 {len(reports)} 个')
    return written
