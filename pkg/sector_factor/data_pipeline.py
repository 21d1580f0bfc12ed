from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd

from . import config
from .exceptions import DataFormatError, ModelValidationError
from .models import ReturnsPanel, Sector, SectorMap

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ON_MISSING_CHOICES = ('drop', 'error')


@dataclass
class IngestOptions:
    """价格读取选项"""
    on_missing: str = config.PIPELINE['on_missing']
    start_date: Optional[date] = None   # 含
    end_date: Optional[date] = None     # 含

    def __post_init__(self):
        if self.on_missing not in ON_MISSING_CHOICES:
            raise ModelValidationError(f'on_missing 必须是 {ON_MISSING_CHOICES} 之一: {self.on_missing!r}')
        if self.start_date and self.end_date and self.start_date > self.end_date:
            raise ModelValidationError(f'起始日期 {self.start_date} 晚于结束日期 {self.end_date}')

    def to_dict(self) -> Dict:
        return {
            'on_missing': self.on_missing,
            'start_date': self.start_date.isoformat() if self.start_date else None,
            'end_date': self.end_date.isoformat() if self.end_date else None,
        }


@dataclass
class IngestReport:
    """读取过程中的剔除与默认分类记录"""
    dropped: Dict[str, str] = field(default_factory=dict)   # 股票 -> 原因
    unclassified_defaults: List[str] = field(default_factory=list)
    ignored_symbols: List[str] = field(default_factory=list)

    @property
    def warning_count(self) -> int:
        return len(self.unclassified_defaults)

    def to_dict(self) -> Dict:
        return {
            'dropped': dict(sorted(self.dropped.items())),
            'unclassified_defaults': sorted(self.unclassified_defaults),
            'ignored_symbols': sorted(self.ignored_symbols),
        }


@dataclass(frozen=True)
class PriceTable:
    """日收盘价表（n 只股票 × (p+1) 个日期）"""
    stock_ids: Tuple[str, ...]
    dates: Tuple[date, ...]
    close_prices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'stock_ids', tuple(self.stock_ids))
        object.__setattr__(self, 'dates', tuple(self.dates))
        prices = np.array(self.close_prices, dtype=float, copy=True)
        prices.setflags(write=False)
        object.__setattr__(self, 'close_prices', prices)

        if prices.shape != (len(self.stock_ids), len(self.dates)):
            raise ModelValidationError(
                f'价格矩阵形状 {prices.shape} 与 ({len(self.stock_ids)}, {len(self.dates)}) 不一致'
            )
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise ModelValidationError('日期必须严格递增')
        if not np.all(np.isfinite(prices)) or np.any(prices <= 0):
            raise ModelValidationError('价格必须全部为正且有限')


def _parse_date(text: str, line: int) -> date:
    try:
        return datetime.strptime(text.strip(), config.PIPELINE['date_format']).date()
    except ValueError:
        raise DataFormatError(f'第 {line} 行日期格式错误: {text!r}（需要 YYYY-MM-DD）')


def _read_raw_csv(path: PathLike, what: str) -> pd.DataFrame:
    """按字符串读取 CSV，不做表头去重与缺失值推断"""
    try:
        raw = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except FileNotFoundError:
        raise DataFormatError(f'{what}文件不存在: {path}')
    except pd.errors.EmptyDataError:
        return pd.DataFrame()
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataFormatError(f'{what}文件格式错误: {e}')
    return raw.fillna('')


def load_prices(path: PathLike, options: Optional[IngestOptions] = None) -> Tuple[PriceTable, IngestReport]:
    """读取价格 CSV（表头 date,SYM1,SYM2,...；空单元格表示缺失）

    Returns:
        (PriceTable, IngestReport)，股票按代码排序
    """
    options = options or IngestOptions()
    raw = _read_raw_csv(path, '价格')
    if raw.empty or raw.shape[1] < 2:
        raise DataFormatError(f'价格文件至少需要 date 列和一个股票列: {path}')

    header = [str(c).strip() for c in raw.iloc[0]]
    if header[0].lower() != 'date':
        raise DataFormatError(f'价格文件第一列必须为 date，实际为 {header[0]!r}')
    symbols = header[1:]
    if any(not s for s in symbols):
        raise DataFormatError('价格文件表头存在空的股票代码')
    duplicates = sorted({s for s in symbols if symbols.count(s) > 1})
    if duplicates:
        raise DataFormatError(f'价格文件表头存在重复股票代码: {duplicates}')

    body = raw.iloc[1:].reset_index(drop=True)
    if body.empty:
        raise DataFormatError(f'价格文件没有数据行: {path}')
    dates = [_parse_date(text, line + 2) for line, text in enumerate(body.iloc[:, 0])]
    for line, (a, b) in enumerate(zip(dates, dates[1:])):
        if b <= a:
            raise DataFormatError(f'第 {line + 3} 行日期 {b} 未严格递增')

    cells = body.iloc[:, 1:].apply(lambda col: col.str.strip())
    cells.columns = symbols
    empty = cells == ''
    numeric = cells.apply(pd.to_numeric, errors='coerce')
    malformed = (numeric.isna() | np.isinf(numeric)) & ~empty
    if malformed.any().any():
        row, col = np.argwhere(malformed.to_numpy())[0]
        raise DataFormatError(f'第 {row + 2} 行、股票 {symbols[col]} 的价格无法解析: {cells.iat[row, col]!r}')

    in_range = np.ones(len(dates), dtype=bool)
    if options.start_date:
        in_range &= np.array([d >= options.start_date for d in dates], dtype=bool)
    if options.end_date:
        in_range &= np.array([d <= options.end_date for d in dates], dtype=bool)
    if not in_range.any():
        raise DataFormatError(f'请求的日期区间 [{options.start_date}, {options.end_date}] 内没有数据')

    values = numeric.to_numpy(dtype=float)[in_range]
    kept_dates = [d for d, keep in zip(dates, in_range) if keep]

    report = IngestReport()
    keep_cols = []
    for col, symbol in enumerate(symbols):
        series = values[:, col]
        missing = np.isnan(series)
        non_positive = ~missing & (series <= 0)
        if not (missing.any() or non_positive.any()):
            keep_cols.append(col)
            continue
        bad_row = int(np.flatnonzero(missing | non_positive)[0])
        reason = '缺失价格' if missing[bad_row] else f'非正价格 {series[bad_row]}'
        if options.on_missing == 'error':
            raise DataFormatError(f'股票 {symbol} 在 {kept_dates[bad_row]} 的{reason}（第 {col + 2} 列）')
        report.dropped[symbol] = f'{reason}（{kept_dates[bad_row]}）'
        logger.warning(f'剔除股票 {symbol}: {reason}（{kept_dates[bad_row]}）')

    if not keep_cols:
        raise DataFormatError('所有股票均因缺失或非正价格被剔除')

    order = sorted(keep_cols, key=lambda c: symbols[c])
    table = PriceTable(
        stock_ids=tuple(symbols[c] for c in order),
        dates=tuple(kept_dates),
        close_prices=values[:, order].T,
    )
    logger.info(f'读取价格: {len(order)} 只股票, {len(kept_dates)} 个日期, 剔除 {len(report.dropped)} 只')
    return table, report


def compute_log_returns(prices: PriceTable) -> ReturnsPanel:
    """日对数收益率 ln(close[i+1]/close[i])，日期取每段收益的结束日"""
    if len(prices.dates) < 2:
        raise DataFormatError(f'计算收益率至少需要2个日期，实际 {len(prices.dates)} 个')
    close = prices.close_prices
    values = np.log(close[:, 1:] / close[:, :-1])
    return ReturnsPanel(stock_ids=prices.stock_ids, dates=prices.dates[1:], values=values, demeaned=False)


def demean(panel: ReturnsPanel) -> ReturnsPanel:
    """逐行减去均值"""
    values = panel.values - panel.values.mean(axis=1, keepdims=True)
    return ReturnsPanel(stock_ids=panel.stock_ids, dates=panel.dates, values=values, demeaned=True)


def load_sectors(path: PathLike, universe: Sequence[str]) -> Tuple[SectorMap, IngestReport]:
    """读取行业文件（symbol,sector_code；代码为 1-11 或 UNCLASSIFIED）

    文件中缺失的股票记为 UNCLASSIFIED，并计入报告的警告数。
    """
    raw = _read_raw_csv(path, '行业')
    if not raw.empty and raw.shape[1] != 2:
        raise DataFormatError(f'行业文件必须恰好两列 symbol,sector_code，实际 {raw.shape[1]} 列')
    if not raw.empty and raw.iat[0, 0].strip().lower() == 'symbol':
        raw = raw.iloc[1:]

    seen: Dict[str, Sector] = {}
    for line, (symbol, code) in enumerate(raw.itertuples(index=False, name=None), start=1):
        symbol = symbol.strip()
        if not symbol:
            raise DataFormatError(f'行业文件第 {line} 条记录缺少股票代码')
        try:
            sector = Sector.parse(code)
        except ValueError as e:
            raise DataFormatError(f'行业文件第 {line} 条记录（{symbol}）: {e}')
        if symbol in seen and seen[symbol] != sector:
            raise DataFormatError(f'股票 {symbol} 的行业分类冲突: {seen[symbol].code} 与 {sector.code}')
        seen[symbol] = sector

    report = IngestReport()
    assignments = {}
    for symbol in universe:
        if symbol in seen:
            assignments[symbol] = seen[symbol]
        else:
            assignments[symbol] = Sector.UNCLASSIFIED
            report.unclassified_defaults.append(symbol)
    report.ignored_symbols = sorted(set(seen) - set(universe))

    if report.unclassified_defaults:
        logger.warning(f'{report.warning_count} 只股票不在行业文件中，记为 UNCLASSIFIED')
    if report.ignored_symbols:
        logger.debug(f'行业文件中 {len(report.ignored_symbols)} 个代码不在股票集合中，已忽略')
    return SectorMap(assignments), report


def drop_unclassified(panel: ReturnsPanel, sectors: SectorMap) -> ReturnsPanel:
    """剔除无行业分类的股票"""
    keep = [j for j, s in enumerate(panel.stock_ids) if sectors.sector_of(s) is not Sector.UNCLASSIFIED]
    if not keep:
        raise DataFormatError('剔除无分类股票后面板为空')
    if len(keep) < panel.n:
        logger.info(f'剔除 {panel.n - len(keep)} 只无行业分类的股票')
    return ReturnsPanel(
        stock_ids=[panel.stock_ids[j] for j in keep],
        dates=panel.dates,
        values=panel.values[keep],
        demeaned=panel.demeaned,
    )


def load_dataset(
    price_path: PathLike,
    sector_path: PathLike,
    options: Optional[IngestOptions] = None,
    demean_returns: bool = config.PIPELINE['demean'],
    exclude_unclassified: bool = config.PIPELINE['drop_unclassified'],
) -> Tuple[ReturnsPanel, SectorMap, IngestReport]:
    """读取价格与行业文件，得到可直接拟合的收益率面板"""
    prices, report = load_prices(price_path, options)
    panel = compute_log_returns(prices)
    sectors, sector_report = load_sectors(sector_path, panel.stock_ids)
    report.unclassified_defaults = sector_report.unclassified_defaults
    report.ignored_symbols = sector_report.ignored_symbols

    if exclude_unclassified:
        panel = drop_unclassified(panel, sectors)
        sectors = sectors.restrict(panel.stock_ids)
    if demean_returns:
        panel = demean(panel)
    return panel, sectors, report
