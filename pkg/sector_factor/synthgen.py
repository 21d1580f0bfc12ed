from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Dict, List, Tuple, Union
import logging

import numpy as np
import pandas as pd

from . import config
from .exceptions import ModelValidationError
from .models import (
    CLASSIFIED_SECTORS, FactorModel, ReturnsPanel, Sector, SectorMap,
    build_mask, factor_labels_for,
)

logger = logging.getLogger(__name__)

# 独立随机流：修改其中一个分量的抽样不影响其他分量
STREAMS = ('sector_loadings', 'sector_signs', 'market_loadings', 'psi', 'factors', 'noise')

# exp 上溢/下溢前的累计对数收益上限
MAX_LOG_PRICE_EXCURSION = 700.0


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """按名称取得种子派生的独立随机数生成器"""
    children = np.random.SeedSequence(int(seed)).spawn(len(STREAMS))
    return np.random.default_rng(children[STREAMS.index(name)])


@dataclass
class SynthSpec:
    """合成模型参数"""
    n_per_sector: Tuple[int, ...]
    n_unclassified: int = 0
    m: int = config.SYNTH['m']
    p: int = config.SYNTH['p']
    sector_loading_range: Tuple[float, float] = config.SYNTH['sector_loading_range']
    market_loading_scale: float = config.SYNTH['market_loading_scale']
    psi_range: Tuple[float, float] = config.SYNTH['psi_range']
    sector_sign_coherent: bool = config.SYNTH['sector_sign_coherent']
    seed: int = config.SYNTH['seed']

    def __post_init__(self):
        self.n_per_sector = tuple(int(k) for k in self.n_per_sector)
        self.sector_loading_range = tuple(float(v) for v in self.sector_loading_range)
        self.psi_range = tuple(float(v) for v in self.psi_range)
        n_sectors = config.MODEL['n_sector_factors']

        if len(self.n_per_sector) != n_sectors:
            raise ModelValidationError(f'n_per_sector 必须有 {n_sectors} 项，实际 {len(self.n_per_sector)}')
        if any(k < 0 for k in self.n_per_sector) or self.n_unclassified < 0:
            raise ModelValidationError('每个行业的股票数必须非负')
        if self.n_total < 1:
            raise ModelValidationError('至少需要一只股票')
        if self.m < n_sectors + 1:
            raise ModelValidationError(f'因子数 m={self.m} 必须至少为 {n_sectors + 1}')
        if self.p < 2:
            raise ModelValidationError(f'交易日数 p={self.p} 必须至少为 2')
        for name, (lo, hi) in (('sector_loading_range', self.sector_loading_range),
                               ('psi_range', self.psi_range)):
            if not 0 < lo <= hi:
                raise ModelValidationError(f'{name} 必须满足 0 < lo <= hi: ({lo}, {hi})')
        if not self.market_loading_scale > 0:
            raise ModelValidationError(f'market_loading_scale 必须为正: {self.market_loading_scale}')
        if int(self.seed) < 0:
            raise ModelValidationError(f'随机种子必须为非负整数: {self.seed}')

    @property
    def n_total(self) -> int:
        return sum(self.n_per_sector) + self.n_unclassified

    @classmethod
    def with_sectors(cls, counts: Dict[int, int], **kwargs) -> 'SynthSpec':
        """按 {行业代码: 股票数} 构造，其余行业为空"""
        n_per_sector = [0] * config.MODEL['n_sector_factors']
        for code, count in counts.items():
            n_per_sector[Sector(code) - 1] = count
        return cls(n_per_sector=tuple(n_per_sector), **kwargs)

    def stock_sectors(self) -> List[Tuple[str, Sector]]:
        """生成股票代码及行业，代码按字典序即行业顺序"""
        rows = []
        for sector, count in zip(CLASSIFIED_SECTORS, self.n_per_sector):
            rows.extend((f'S{int(sector):02d}_{k:03d}', sector) for k in range(count))
        rows.extend((f'U_{k:03d}', Sector.UNCLASSIFIED) for k in range(self.n_unclassified))
        return rows

    def sector_map(self) -> SectorMap:
        return SectorMap(dict(self.stock_sectors()))

    def to_dict(self) -> Dict:
        return {
            'n_per_sector': list(self.n_per_sector),
            'n_unclassified': self.n_unclassified,
            'm': self.m,
            'p': self.p,
            'sector_loading_range': list(self.sector_loading_range),
            'market_loading_scale': self.market_loading_scale,
            'psi_range': list(self.psi_range),
            'sector_sign_coherent': self.sector_sign_coherent,
            'seed': int(self.seed),
        }


def sample_model(spec: SynthSpec) -> FactorModel:
    """按规格抽取带行业结构的真实模型"""
    stocks = spec.stock_sectors()
    stock_ids = [s for s, _ in stocks]
    mask = build_mask(spec.sector_map(), stock_ids, spec.m)
    n = len(stock_ids)
    n_sectors = config.MODEL['n_sector_factors']

    lo, hi = spec.sector_loading_range
    magnitudes = stream_rng(spec.seed, 'sector_loadings').uniform(lo, hi, size=n)
    sign_rng = stream_rng(spec.seed, 'sector_signs')
    if spec.sector_sign_coherent:
        column_signs = sign_rng.choice([-1.0, 1.0], size=n_sectors)
        signs = np.array([column_signs[int(sec) - 1] if sec else 1.0 for _, sec in stocks])
    else:
        signs = sign_rng.choice([-1.0, 1.0], size=n)

    loadings = np.zeros((n, spec.m))
    for j, (_, sector) in enumerate(stocks):
        if sector is not Sector.UNCLASSIFIED:
            loadings[j, int(sector) - 1] = signs[j] * magnitudes[j]
    loadings[:, n_sectors:] = stream_rng(spec.seed, 'market_loadings').normal(
        0.0, spec.market_loading_scale, size=(n, spec.m - n_sectors)
    )

    psi_lo, psi_hi = spec.psi_range
    psi = stream_rng(spec.seed, 'psi').uniform(psi_lo, psi_hi, size=n)
    return FactorModel(
        loadings=loadings,
        psi=psi,
        mask=mask,
        factor_labels=factor_labels_for(mask),
        stock_ids=stock_ids,
    )


def business_dates(count: int, start: Union[str, date] = config.SYNTH['start_date']) -> List[date]:
    """从 start 开始的 count 个工作日"""
    return [ts.date() for ts in pd.bdate_range(start=start, periods=count)]


def sample_panel(model: FactorModel, p: int, seed: int,
                 start: Union[str, date] = config.SYNTH['start_date']) -> ReturnsPanel:
    """抽取 p 列 X_i = ΛF_i + ε_i，F_i ~ N(0, I)，ε_i ~ N(0, diag(Ψ))；不去均值"""
    if p < 2:
        raise ModelValidationError(f'交易日数 p={p} 必须至少为 2')
    factors = stream_rng(seed, 'factors').standard_normal((model.m, p))
    noise = stream_rng(seed, 'noise').standard_normal((model.n, p)) * np.sqrt(model.psi)[:, None]
    values = model.loadings @ factors + noise
    stock_ids = model.stock_ids or tuple(f'X{j:04d}' for j in range(model.n))
    # 第一个日期留给起始价格
    dates = business_dates(p + 1, start)[1:]
    return ReturnsPanel(stock_ids=stock_ids, dates=dates, values=values, demeaned=False)


def reconstruct_prices(panel: ReturnsPanel, start_price: float = config.SYNTH['start_price']) -> pd.DataFrame:
    """由收益率重建价格 start_price·exp(累计收益)，行为日期、列为股票"""
    log_prices = np.concatenate([np.zeros((panel.n, 1)), np.cumsum(panel.values, axis=1)], axis=1)
    if np.max(np.abs(log_prices)) > MAX_LOG_PRICE_EXCURSION:
        raise ModelValidationError('累计对数收益过大，无法以浮点价格表示；请减小载荷或 p')
    first = (pd.Timestamp(panel.dates[0]) - pd.offsets.BDay(1)).date()
    dates = [first] + list(panel.dates)
    frame = pd.DataFrame(
        start_price * np.exp(log_prices).T,
        index=[d.isoformat() for d in dates],
        columns=list(panel.stock_ids),
    )
    frame.index.name = 'date'
    return frame


def write_simulation_files(panel: ReturnsPanel, sectors: SectorMap, out_dir: Union[str, Path],
                           start_price: float = config.SYNTH['start_price']) -> Tuple[Path, Path]:
    """写出与数据管道兼容的价格文件与行业文件"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    price_path = out_dir / config.RUNTIME['prices_filename']
    sector_path = out_dir / config.RUNTIME['sectors_filename']

    reconstruct_prices(panel, start_price).to_csv(
        price_path, float_format=config.PIPELINE['float_format'], lineterminator='\n'
    )
    pd.DataFrame({
        'symbol': list(panel.stock_ids),
        'sector_code': [sectors.sector_of(s).code for s in panel.stock_ids],
    }).to_csv(sector_path, index=False, lineterminator='\n')

    logger.info(f'已写出合成数据: {price_path}, {sector_path}')
    return price_path, sector_path


def simulate(spec: SynthSpec) -> Tuple[FactorModel, ReturnsPanel, SectorMap]:
    """抽取模型与面板（面板种子与模型种子相同，随机流各自独立）"""
    model = sample_model(spec)
    panel = sample_panel(model, spec.p, spec.seed)
    return model, panel, spec.sector_map()
