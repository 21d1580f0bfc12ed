from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple
import logging
import math
import os

import numpy as np
from scipy import linalg

from . import config
from .exceptions import ModelValidationError, NumericalError
from .models import (
    FactorModel, LoadingMask, PosteriorMoments, ReturnsPanel,
    apply_mask, factor_labels_for, implied_covariance,
)

logger = logging.getLogger(__name__)


@dataclass
class FitConfig:
    """EM 拟合参数"""
    max_iterations: int = config.EM['max_iterations']
    rel_tol: Optional[float] = config.EM['rel_tol']
    seed: int = config.EM['seed']
    init_scale: float = config.EM['init_scale']
    use_unconstrained_step: bool = False  # 用 AB⁻¹ 代替逐行约束更新（仅限全真模式）
    threads: Optional[int] = None         # None 表示读取环境变量

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise ModelValidationError(f'最大迭代次数必须 >= 1: {self.max_iterations}')
        if self.rel_tol is not None and not self.rel_tol > 0:
            raise ModelValidationError(f'rel_tol 必须为正: {self.rel_tol}')
        if not self.init_scale > 0:
            raise ModelValidationError(f'init_scale 必须为正: {self.init_scale}')
        if int(self.seed) < 0:
            raise ModelValidationError(f'随机种子必须为非负整数: {self.seed}')
        if self.threads is not None and int(self.threads) < 1:
            raise ModelValidationError(f'线程数必须为正: {self.threads}')

    def to_dict(self) -> dict:
        return {
            'max_iterations': int(self.max_iterations),
            'rel_tol': self.rel_tol,
            'seed': int(self.seed),
            'init_scale': float(self.init_scale),
            'use_unconstrained_step': self.use_unconstrained_step,
            'threads': resolve_threads(self.threads),
        }


@dataclass
class FitTrace:
    """拟合轨迹

    loglik_per_iter 为每次迭代后模型的精确边际对数似然（EM 保证不减）；
    q_per_iter 为同一模型按其自身后验矩计算的期望对数似然 Q（省略常数 c）。
    """
    loglik_per_iter: List[float] = field(default_factory=list)
    q_per_iter: List[float] = field(default_factory=list)
    iterations_run: int = 0
    converged_by_tol: bool = False

    def record(self, loglik: float, q: float):
        self.loglik_per_iter.append(float(loglik))
        self.q_per_iter.append(float(q))
        self.iterations_run = len(self.loglik_per_iter)

    def is_monotone(self, slack: float = config.EM['monotone_slack']) -> bool:
        """检查对数似然是否单调不减（允许浮点误差）"""
        values = self.loglik_per_iter
        return all(
            b >= a - slack * max(1.0, abs(a))
            for a, b in zip(values, values[1:])
        )

    @property
    def final_loglik(self) -> Optional[float]:
        return self.loglik_per_iter[-1] if self.loglik_per_iter else None


def resolve_threads(threads: Optional[int] = None) -> int:
    """确定 E 步线程数：显式参数优先，其次环境变量，默认1"""
    if threads is not None:
        return max(1, int(threads))
    raw = os.environ.get(config.RUNTIME['threads_env'], '').strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ModelValidationError(f'{config.RUNTIME["threads_env"]} 必须是正整数: {raw!r}')
    if value < 1:
        raise ModelValidationError(f'{config.RUNTIME["threads_env"]} 必须是正整数: {raw!r}')
    return value


def cho_factor_spd(matrix: np.ndarray, what: str, row: Optional[int] = None):
    """对称正定分解；失败时加一次对角抖动重试，仍失败则报错"""
    if not np.all(np.isfinite(matrix)):
        raise NumericalError(f'{what} 含有 NaN 或 Inf', row=row)
    try:
        return linalg.cho_factor(matrix, lower=True, check_finite=False)
    except linalg.LinAlgError:
        size = matrix.shape[0]
        jitter = config.EM['jitter_scale'] * float(np.trace(matrix)) / size
        logger.warning(f'{what} 分解失败，对角线加抖动 {jitter:.3e} 后重试')
        if not jitter > 0:
            raise NumericalError(f'{what} 不是正定矩阵', row=row)
        try:
            return linalg.cho_factor(matrix + jitter * np.eye(size), lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise NumericalError(f'{what} 加抖动后仍不是正定矩阵', row=row)


def _accumulate_blocks(beta: np.ndarray, X: np.ndarray, threads: int):
    """按固定块宽计算 βX 及其外积和，规约顺序与线程数无关"""
    width = config.EM['block_size']
    starts = list(range(0, X.shape[1], width))

    def work(start: int):
        block = X[:, start:start + width]
        ef_block = beta @ block
        return ef_block, ef_block @ ef_block.T, block @ ef_block.T

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            parts = list(executor.map(work, starts))
    else:
        parts = [work(start) for start in starts]

    m, n = beta.shape
    outer = np.zeros((m, m))
    cross = np.zeros((n, m))
    for _, part_outer, part_cross in parts:
        outer += part_outer
        cross += part_cross
    ef = np.concatenate([part[0] for part in parts], axis=1) if parts else np.zeros((m, 0))
    return ef, outer, cross


def posterior_beta(model: FactorModel) -> np.ndarray:
    """β = Λᵀ(Ψ + ΛΛᵀ)⁻¹"""
    factor = cho_factor_spd(implied_covariance(model), '隐含协方差 ΛΛᵀ+Ψ')
    return linalg.cho_solve(factor, model.loadings, check_finite=False).T


def e_step(model: FactorModel, panel: ReturnsPanel, threads: Optional[int] = None) -> PosteriorMoments:
    """E 步：计算 E(F|X_i)、B = Σ E(FFᵀ|X_i) 与 A = Σ X_i E(F|X_i)ᵀ"""
    if panel.n != model.n:
        raise ModelValidationError(f'面板股票数 {panel.n} 与模型 {model.n} 不一致')
    X = panel.values
    lam = model.loadings
    beta = posterior_beta(model)

    ef, outer, cross = _accumulate_blocks(beta, X, resolve_threads(threads))
    post_cov = np.eye(model.m) - beta @ lam
    eff_sum = panel.p * post_cov + outer
    eff_sum = 0.5 * (eff_sum + eff_sum.T)
    sum_sq = np.einsum('ij,ij->i', X, X)
    return PosteriorMoments(ef=ef, eff_sum=eff_sum, cross_sum=cross, sum_sq=sum_sq, p=panel.p)


def m_step_unconstrained(moments: PosteriorMoments) -> np.ndarray:
    """Λnew = AB⁻¹，通过求解 BΛᵀ = Aᵀ 得到"""
    factor = cho_factor_spd(moments.eff_sum, '矩阵 B')
    return linalg.cho_solve(factor, moments.cross_sum.T, check_finite=False).T


def m_step_constrained(moments: PosteriorMoments, mask: LoadingMask) -> np.ndarray:
    """逐行约束更新 Λnew(j, I_j) = A(j, I_j) B(I_j, I_j)⁻¹

    模式相同的行共用一次分解；I_j 以外的元素严格为 0.0。
    """
    A = moments.cross_sum
    B = moments.eff_sum
    if mask.pattern.shape != A.shape:
        raise ModelValidationError(f'模式形状 {mask.pattern.shape} 与 A 形状 {A.shape} 不一致')

    result = np.zeros_like(A)
    for rows, cols in mask.row_groups():
        if cols.size == 0:
            continue
        pattern = ''.join('1' if c else '0' for c in mask.pattern[rows[0]])
        factor = cho_factor_spd(B[np.ix_(cols, cols)], f'B 子矩阵（模式 {pattern}）', row=int(rows[0]))
        solved = linalg.cho_solve(factor, A[np.ix_(rows, cols)].T, check_finite=False).T
        result[np.ix_(rows, cols)] = solved
    return result


def m_step_psi(panel: ReturnsPanel, moments: PosteriorMoments, lambda_new: np.ndarray) -> np.ndarray:
    """Ψnew = (1/p) diag(Σ X_i X_iᵀ − Λnew Σ E(F|X_i) X_iᵀ)，并截断到下限"""
    if lambda_new.shape != moments.cross_sum.shape:
        raise ModelValidationError('Λnew 与 A 形状不一致')
    if panel.n != lambda_new.shape[0] or panel.p != moments.p:
        raise ModelValidationError('面板与后验矩维度不一致')
    X = panel.values
    second_moment = np.einsum('ij,ij->i', X, X)
    explained = np.einsum('jk,jk->j', lambda_new, moments.cross_sum)
    psi = (second_moment - explained) / moments.p
    return np.maximum(psi, config.MODEL['psi_floor'])


def q_from_moments(model: FactorModel, moments: PosteriorMoments) -> float:
    """按给定后验矩计算期望对数似然 Q（c ≡ 0）"""
    psi = model.psi
    if np.any(psi <= 0):
        raise NumericalError('特殊方差必须为正，无法计算 log|Ψ|')
    lam = model.loadings
    inv_psi = 1.0 / psi
    quadratic = 0.5 * np.sum(moments.sum_sq * inv_psi)
    cross = np.sum(lam * moments.cross_sum * inv_psi[:, None])
    precision = lam.T @ (lam * inv_psi[:, None])
    trace = 0.5 * np.sum(precision * moments.eff_sum)
    return float(-0.5 * moments.p * np.sum(np.log(psi)) - (quadratic - cross + trace))


def expected_loglik(model: FactorModel, panel: ReturnsPanel) -> float:
    """期望对数似然 Q，后验矩由当前模型计算"""
    if np.any(model.psi <= 0):
        raise NumericalError('特殊方差必须为正，无法计算 log|Ψ|')
    return q_from_moments(model, e_step(model, panel))


def marginal_loglik(model: FactorModel, panel: ReturnsPanel) -> float:
    """X_i ~ N(0, ΛΛᵀ+Ψ) 下的精确对数似然"""
    if panel.n != model.n:
        raise ModelValidationError(f'面板股票数 {panel.n} 与模型 {model.n} 不一致')
    X = panel.values
    factor = cho_factor_spd(implied_covariance(model), '隐含协方差 ΛΛᵀ+Ψ')
    log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
    quadratic = np.sum(X * linalg.cho_solve(factor, X, check_finite=False))
    return float(-0.5 * (panel.p * (model.n * math.log(2.0 * math.pi) + log_det) + quadratic))


def spectral_loadings(panel: ReturnsPanel, mask: LoadingMask) -> np.ndarray:
    """逐列主成分起点

    按支撑集大小从小到大处理各列：取残差协方差在支撑集上的最大特征对，
    幅度按单因子概率 PCA 扣除其余特征值的均值，再从残差中减去该列的贡献。
    全真模式下即为逐次压缩的主成分。支撑集为空或没有剩余信号的列为 0。
    """
    residual = panel.values @ panel.values.T / panel.p
    loadings = np.zeros(mask.pattern.shape)
    for k in np.argsort(mask.pattern.sum(axis=0), kind='stable'):
        rows = np.flatnonzero(mask.pattern[:, k])
        if rows.size == 0:
            continue
        block = residual[np.ix_(rows, rows)]
        top = rows.size - 1
        values, vectors = linalg.eigh(block, subset_by_index=[top, top])
        value = float(values[0])
        noise = (float(np.trace(block)) - value) / top if top > 0 else 0.5 * value
        amplitude = math.sqrt(max(value - noise, 0.0))
        if amplitude == 0.0:
            continue
        vector = vectors[:, 0]
        if vector[np.argmax(np.abs(vector))] < 0:
            vector = -vector
        column = amplitude * vector
        loadings[rows, k] = column
        residual[np.ix_(rows, rows)] -= np.outer(column, column)
    return loadings


class EMEngine:
    """带载荷模式约束的因子模型 EM 拟合器"""

    def __init__(self, fit_config: Optional[FitConfig] = None):
        self.config = fit_config or FitConfig()
        self.threads = resolve_threads(self.config.threads)
        self.logger = logging.getLogger('EMEngine')

    def initialize(self, panel: ReturnsPanel, mask: LoadingMask,
                   stock_ids: Optional[Tuple[str, ...]] = None) -> FactorModel:
        """初始化：逐列主成分起点加 N(0, init_scale²) 扰动并屏蔽，Ψ 取各行样本方差"""
        rng = np.random.default_rng(int(self.config.seed))
        loadings = spectral_loadings(panel, mask)
        loadings += rng.normal(0.0, self.config.init_scale, size=mask.pattern.shape)
        psi = np.maximum(panel.values.var(axis=1), config.MODEL['psi_floor'])
        return FactorModel(
            loadings=apply_mask(loadings, mask),
            psi=psi,
            mask=mask,
            factor_labels=factor_labels_for(mask),
            stock_ids=stock_ids,
        )

    def m_step(self, panel: ReturnsPanel, moments: PosteriorMoments, mask: LoadingMask) -> Tuple[np.ndarray, np.ndarray]:
        """M 步：先更新 Λ，再用新 Λ 更新 Ψ"""
        if self.config.use_unconstrained_step:
            lambda_new = m_step_unconstrained(moments)
        else:
            lambda_new = m_step_constrained(moments, mask)
        return lambda_new, m_step_psi(panel, moments, lambda_new)

    def fit(self, panel: ReturnsPanel, mask: LoadingMask) -> Tuple[FactorModel, FitTrace]:
        """交替执行 E 步与 M 步，最多 max_iterations 次"""
        if panel.n < 1 or panel.p < 2:
            raise ModelValidationError(f'面板至少需要1只股票和2个交易日，实际 n={panel.n}, p={panel.p}')
        if mask.n != panel.n:
            raise ModelValidationError(f'模式行数 {mask.n} 与面板股票数 {panel.n} 不一致')
        if self.config.use_unconstrained_step and not mask.pattern.all():
            raise ModelValidationError('无约束 M 步只能用于全真模式')
        if not panel.demeaned:
            self.logger.warning('面板未去均值，按 μ=0 直接拟合')

        model = self.initialize(panel, mask, stock_ids=panel.stock_ids)
        trace = FitTrace()
        slack = config.EM['monotone_slack']
        self.logger.info(
            f'开始 EM 拟合: n={panel.n}, p={panel.p}, m={mask.m}, '
            f'最大迭代={self.config.max_iterations}, 线程={self.threads}'
        )

        iteration = 0
        try:
            moments = e_step(model, panel, threads=self.threads)
            for iteration in range(1, int(self.config.max_iterations) + 1):
                lambda_new, psi_new = self.m_step(panel, moments, mask)
                model = FactorModel(
                    loadings=lambda_new,
                    psi=psi_new,
                    mask=mask,
                    factor_labels=model.factor_labels,
                    stock_ids=model.stock_ids,
                )
                moments = e_step(model, panel, threads=self.threads)
                loglik = marginal_loglik(model, panel)
                q = q_from_moments(model, moments)

                previous = trace.final_loglik
                trace.record(loglik, q)
                self.logger.debug(f'迭代 {iteration}: 对数似然={loglik:.10g}, Q={q:.10g}')

                if previous is not None:
                    if loglik < previous - slack * max(1.0, abs(previous)):
                        self.logger.warning(f'迭代 {iteration}: 对数似然下降 {previous:.10g} -> {loglik:.10g}')
                    if self.config.rel_tol is not None and \
                            abs(loglik - previous) <= self.config.rel_tol * max(abs(previous), 1e-300):
                        trace.converged_by_tol = True
                        self.logger.info(f'迭代 {iteration}: 相对变化低于 {self.config.rel_tol}，提前停止')
                        break
        except NumericalError as e:
            raise e.with_iteration(iteration) from e

        self.logger.info(f'EM 拟合完成: 迭代 {trace.iterations_run} 次, 最终对数似然={trace.final_loglik:.10g}')
        return model, trace


def fit(panel: ReturnsPanel, mask: LoadingMask, fit_config: Optional[FitConfig] = None) -> Tuple[FactorModel, FitTrace]:
    """拟合因子模型（EMEngine 的便捷入口）"""
    return EMEngine(fit_config).fit(panel, mask)
