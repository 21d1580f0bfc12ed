from dataclasses import dataclass, field
from datetime import date
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import config
from .exceptions import ModelValidationError


class Sector(IntEnum):
    """IBES 行业分类（11个行业，0 表示无分类）"""
    UNCLASSIFIED = 0
    FINANCE = 1
    HEALTH_CARE = 2
    CONSUMER_NON_DURABLES = 3
    CONSUMER_SERVICES = 4
    CONSUMER_DURABLES = 5
    ENERGY = 6
    TRANSPORTATION = 7
    TECHNOLOGY = 8
    BASIC_INDUSTRIES = 9
    CAPITAL_GOODS = 10
    PUBLIC_UTILITIES = 11

    @property
    def label(self) -> str:
        """IBES 标签，例如 'HEALTH CARE'"""
        return SECTOR_NAMES[self]

    @property
    def code(self) -> str:
        """文件中使用的代码：整数字符串或 UNCLASSIFIED"""
        return 'UNCLASSIFIED' if self is Sector.UNCLASSIFIED else str(int(self))

    @classmethod
    def parse(cls, text: str) -> 'Sector':
        """解析行业代码（'1'..'11'，允许前导零，或 UNCLASSIFIED）"""
        token = str(text).strip()
        if token.upper() == 'UNCLASSIFIED':
            return cls.UNCLASSIFIED
        try:
            value = int(token)
        except ValueError:
            raise ValueError(f'无效的行业代码: {text!r}')
        if not 1 <= value <= 11:
            raise ValueError(f'行业代码超出范围 1-11: {text!r}')
        return cls(value)


SECTOR_NAMES: Dict[Sector, str] = {
    Sector.UNCLASSIFIED: 'UNCLASSIFIED',
    Sector.FINANCE: 'FINANCE',
    Sector.HEALTH_CARE: 'HEALTH CARE',
    Sector.CONSUMER_NON_DURABLES: 'CONSUMER NON-DURABLES',
    Sector.CONSUMER_SERVICES: 'CONSUMER SERVICES',
    Sector.CONSUMER_DURABLES: 'CONSUMER DURABLES',
    Sector.ENERGY: 'ENERGY',
    Sector.TRANSPORTATION: 'TRANSPORTATION',
    Sector.TECHNOLOGY: 'TECHNOLOGY',
    Sector.BASIC_INDUSTRIES: 'BASIC INDUSTRIES',
    Sector.CAPITAL_GOODS: 'CAPITAL GOODS',
    Sector.PUBLIC_UTILITIES: 'PUBLIC UTILITIES',
}

CLASSIFIED_SECTORS: Tuple[Sector, ...] = tuple(s for s in Sector if s is not Sector.UNCLASSIFIED)


def _frozen_array(values, dtype=float) -> np.ndarray:
    """复制为只读数组"""
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ReturnsPanel:
    """日对数收益率面板（n 只股票 × p 个交易日）"""
    stock_ids: Tuple[str, ...]
    dates: Tuple[date, ...]
    values: np.ndarray
    demeaned: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'stock_ids', tuple(self.stock_ids))
        object.__setattr__(self, 'dates', tuple(self.dates))
        values = _frozen_array(self.values)
        object.__setattr__(self, 'values', values)

        if values.ndim != 2:
            raise ModelValidationError(f'收益率矩阵必须是二维的，实际维度: {values.ndim}')
        n, p = values.shape
        if n != len(self.stock_ids):
            raise ModelValidationError(f'行数 {n} 与股票数 {len(self.stock_ids)} 不一致')
        if p != len(self.dates):
            raise ModelValidationError(f'列数 {p} 与日期数 {len(self.dates)} 不一致')
        if len(set(self.stock_ids)) != n:
            raise ModelValidationError('股票代码存在重复')
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise ModelValidationError('日期必须严格递增')
        if not np.all(np.isfinite(values)):
            raise ModelValidationError('收益率中存在 NaN 或 Inf')
        if self.demeaned and p > 0:
            row_sums = np.abs(values.sum(axis=1))
            if np.any(row_sums > 1e-9 * p):
                raise ModelValidationError('标记为已去均值，但存在行和不为零的股票')

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SectorMap:
    """股票到 IBES 行业的映射"""
    assignments: Dict[str, Sector] = field(default_factory=dict)

    def __post_init__(self):
        cleaned = {}
        for stock_id, sector in self.assignments.items():
            cleaned[str(stock_id)] = Sector(sector)
        object.__setattr__(self, 'assignments', cleaned)

    @property
    def sector_names(self) -> Dict[Sector, str]:
        return dict(SECTOR_NAMES)

    def sector_of(self, stock_id: str) -> Sector:
        """获取股票所属行业"""
        try:
            return self.assignments[stock_id]
        except KeyError:
            raise ModelValidationError(f'未知股票代码: {stock_id}')

    def restrict(self, stock_ids: Sequence[str]) -> 'SectorMap':
        """限制到给定股票集合"""
        return SectorMap({s: self.sector_of(s) for s in stock_ids})

    def __contains__(self, stock_id: str) -> bool:
        return stock_id in self.assignments

    def __len__(self) -> int:
        return len(self.assignments)


@dataclass(frozen=True)
class LoadingMask:
    """载荷矩阵的非零模式（前11列为行业因子，其余为市场因子）

    structured=False 表示标准因子模型的全真模式，此时不检查行业结构。
    """
    pattern: np.ndarray
    n_sector_factors: int = config.MODEL['n_sector_factors']
    structured: bool = True

    def __post_init__(self):
        pattern = _frozen_array(self.pattern, dtype=bool)
        object.__setattr__(self, 'pattern', pattern)
        if pattern.ndim != 2:
            raise ModelValidationError('载荷模式必须是二维的')
        if not self.structured:
            return

        k = self.n_sector_factors
        n, m = pattern.shape
        if m < k + 1:
            raise ModelValidationError(f'因子数 m={m} 必须至少为 {k + 1}（至少一个市场因子）')
        if not pattern[:, k:].all():
            raise ModelValidationError('市场因子列必须对所有股票开放')
        per_row = pattern[:, :k].sum(axis=1)
        if np.any(per_row > 1):
            bad = int(np.flatnonzero(per_row > 1)[0])
            raise ModelValidationError(f'股票行 {bad} 属于多个行业')

    @property
    def n(self) -> int:
        return self.pattern.shape[0]

    @property
    def m(self) -> int:
        return self.pattern.shape[1]

    @property
    def n_market_factors(self) -> int:
        return self.m - self.n_sector_factors

    def nonzero_indices(self, row: int) -> np.ndarray:
        """第 row 行允许非零的列索引集合 I_j（从0开始）"""
        return np.flatnonzero(self.pattern[row])

    def row_groups(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """按相同非零模式对行分组，返回 [(行索引, 列索引)]，顺序确定"""
        groups: Dict[bytes, List[int]] = {}
        for j in range(self.n):
            groups.setdefault(self.pattern[j].tobytes(), []).append(j)
        result = []
        for key in sorted(groups, key=lambda b: groups[b][0]):
            rows = np.asarray(groups[key], dtype=int)
            result.append((rows, self.nonzero_indices(int(rows[0]))))
        return result

    @classmethod
    def full(cls, n: int, m: int) -> 'LoadingMask':
        """标准因子模型使用的全真模式"""
        if m < 1:
            raise ModelValidationError(f'因子数必须为正: {m}')
        return cls(np.ones((n, m), dtype=bool), structured=False)


@dataclass(frozen=True)
class FactorModel:
    """因子模型 X = ΛF + ε（μ 取 0）"""
    loadings: np.ndarray
    psi: np.ndarray
    mask: LoadingMask
    factor_labels: Tuple[str, ...]
    stock_ids: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        loadings = _frozen_array(self.loadings)
        psi = _frozen_array(self.psi)
        object.__setattr__(self, 'loadings', loadings)
        object.__setattr__(self, 'psi', psi)
        object.__setattr__(self, 'factor_labels', tuple(self.factor_labels))
        if self.stock_ids is not None:
            object.__setattr__(self, 'stock_ids', tuple(self.stock_ids))

        if loadings.shape != self.mask.pattern.shape:
            raise ModelValidationError(f'载荷矩阵形状 {loadings.shape} 与模式 {self.mask.pattern.shape} 不一致')
        n, m = loadings.shape
        if psi.shape != (n,):
            raise ModelValidationError(f'特殊方差长度 {psi.shape} 与股票数 {n} 不一致')
        if len(self.factor_labels) != m:
            raise ModelValidationError(f'因子标签数 {len(self.factor_labels)} 与因子数 {m} 不一致')
        if self.stock_ids is not None and len(self.stock_ids) != n:
            raise ModelValidationError('股票代码数量与载荷行数不一致')
        if not np.all(np.isfinite(loadings)):
            raise ModelValidationError('载荷中存在 NaN 或 Inf')
        if np.any(loadings[~self.mask.pattern] != 0.0):
            raise ModelValidationError('被屏蔽的载荷必须严格为 0')
        if not np.all(np.isfinite(psi)) or np.any(psi < config.MODEL['psi_floor']):
            raise ModelValidationError('特殊方差必须有限且不低于下限')

    @property
    def n(self) -> int:
        return self.loadings.shape[0]

    @property
    def m(self) -> int:
        return self.loadings.shape[1]

    def check_positive_definite(self) -> bool:
        """检查隐含协方差是否正定"""
        try:
            np.linalg.cholesky(implied_covariance(self))
        except np.linalg.LinAlgError:
            return False
        return True


@dataclass(frozen=True)
class PosteriorMoments:
    """E 步得到的后验矩

    ef:        m×p，第 i 列为 E(F|X_i)
    eff_sum:   m×m，B = Σ E(FFᵀ|X_i)
    cross_sum: n×m，A = Σ X_i E(F|X_i)ᵀ
    sum_sq:    长度 n，Σ_i X_i[j]²
    """
    ef: np.ndarray
    eff_sum: np.ndarray
    cross_sum: np.ndarray
    sum_sq: np.ndarray
    p: int

    def __post_init__(self):
        for name in ('ef', 'eff_sum', 'cross_sum', 'sum_sq'):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        object.__setattr__(self, 'p', int(self.p))

        m = self.eff_sum.shape[0] if self.eff_sum.ndim == 2 else -1
        if self.eff_sum.shape != (m, m):
            raise ModelValidationError(f'B 必须是方阵，实际形状: {self.eff_sum.shape}')
        if self.ef.shape != (m, self.p):
            raise ModelValidationError(f'E(F|X) 形状 {self.ef.shape} 与 (m, p) = ({m}, {self.p}) 不一致')
        if self.cross_sum.ndim != 2 or self.cross_sum.shape[1] != m:
            raise ModelValidationError(f'A 形状 {self.cross_sum.shape} 与因子数 {m} 不一致')
        if self.sum_sq.shape != (self.cross_sum.shape[0],):
            raise ModelValidationError(f'Σ X² 长度 {self.sum_sq.shape} 与股票数 {self.cross_sum.shape[0]} 不一致')
        for name in ('ef', 'eff_sum', 'cross_sum', 'sum_sq'):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelValidationError(f'后验矩 {name} 中存在 NaN 或 Inf')
        scale = max(1.0, float(np.max(np.abs(self.eff_sum)))) if m > 0 else 1.0
        if not np.allclose(self.eff_sum, self.eff_sum.T, rtol=0.0, atol=1e-10 * scale):
            raise ModelValidationError('B 必须是对称矩阵')

    @property
    def m(self) -> int:
        return self.eff_sum.shape[0]


def factor_labels_for(mask: LoadingMask) -> Tuple[str, ...]:
    """生成因子标签：行业名 + MKT1...，标准模型为 F1..Fm"""
    if not mask.structured:
        prefix = config.MODEL['standard_label_prefix']
        return tuple(f'{prefix}{k + 1}' for k in range(mask.m))
    sector_labels = [SECTOR_NAMES[s] for s in CLASSIFIED_SECTORS[:mask.n_sector_factors]]
    prefix = config.MODEL['market_label_prefix']
    market_labels = [f'{prefix}{k + 1}' for k in range(mask.n_market_factors)]
    return tuple(sector_labels + market_labels)


def implied_covariance(model: FactorModel) -> np.ndarray:
    """隐含协方差 ΛΛᵀ + Ψ"""
    lam = model.loadings
    cov = lam @ lam.T
    cov = 0.5 * (cov + cov.T)
    cov[np.diag_indices_from(cov)] += model.psi
    return cov


def build_mask(sectors: SectorMap, stock_ids: Sequence[str], m: int) -> LoadingMask:
    """根据行业分类构建载荷模式

    Args:
        sectors: 行业映射
        stock_ids: 股票顺序（决定行顺序）
        m: 因子总数（>= 12）
    Returns:
        LoadingMask，行业 k 的股票在第 k 列及全部市场列上为真
    """
    k = config.MODEL['n_sector_factors']
    if m < k + 1:
        raise ModelValidationError(f'因子数 m={m} 必须至少为 {k + 1}')

    pattern = np.zeros((len(stock_ids), m), dtype=bool)
    pattern[:, k:] = True
    for j, stock_id in enumerate(stock_ids):
        sector = sectors.sector_of(stock_id)
        if sector is not Sector.UNCLASSIFIED:
            pattern[j, int(sector) - 1] = True
    return LoadingMask(pattern, n_sector_factors=k, structured=True)


def apply_mask(loadings: np.ndarray, mask: LoadingMask) -> np.ndarray:
    """把模式外的载荷置为严格的 0.0"""
    loadings = np.asarray(loadings, dtype=float)
    if loadings.shape != mask.pattern.shape:
        raise ModelValidationError(f'形状不一致: {loadings.shape} vs {mask.pattern.shape}')
    return np.where(mask.pattern, loadings, 0.0)
