from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union
import hashlib
import json
import logging

import numpy as np
import pandas as pd

from . import config
from .em_engine import FitTrace
from .exceptions import DataFormatError, ModelValidationError
from .models import FactorModel, LoadingMask

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MODEL_FORMAT = 'sector-factor-model'
MODEL_FORMAT_VERSION = 1


def model_to_dict(model: FactorModel) -> Dict:
    """模型序列化为字典：显式维度 + 行优先展开的数组"""
    return {
        'format': MODEL_FORMAT,
        'version': MODEL_FORMAT_VERSION,
        'n': model.n,
        'm': model.m,
        'n_sector_factors': model.mask.n_sector_factors,
        'structured': model.mask.structured,
        'stock_ids': list(model.stock_ids) if model.stock_ids is not None else None,
        'factor_labels': list(model.factor_labels),
        'lambda': [float(v) for v in model.loadings.ravel(order='C')],
        'psi': [float(v) for v in model.psi],
        'mask': [int(v) for v in model.mask.pattern.ravel(order='C')],
    }


def model_from_dict(data: Dict) -> FactorModel:
    """从字典恢复模型"""
    try:
        if data.get('format') != MODEL_FORMAT:
            raise DataFormatError(f'不是模型文件（format={data.get("format")!r}）')
        if data.get('version') != MODEL_FORMAT_VERSION:
            raise DataFormatError(f'不支持的模型文件版本: {data.get("version")!r}')
        n, m = int(data['n']), int(data['m'])
        if len(data['lambda']) != n * m or len(data['mask']) != n * m or len(data['psi']) != n:
            raise DataFormatError(f'模型数组长度与维度 n={n}, m={m} 不一致')
        mask = LoadingMask(
            np.asarray(data['mask'], dtype=int).reshape(n, m).astype(bool),
            n_sector_factors=int(data['n_sector_factors']),
            structured=bool(data['structured']),
        )
        return FactorModel(
            loadings=np.asarray(data['lambda'], dtype=float).reshape(n, m),
            psi=np.asarray(data['psi'], dtype=float),
            mask=mask,
            factor_labels=data['factor_labels'],
            stock_ids=data.get('stock_ids'),
        )
    except KeyError as e:
        raise DataFormatError(f'模型文件缺少字段: {e}')
    except ModelValidationError as e:
        raise DataFormatError(f'模型文件内容无效: {e}')


def save_model(model: FactorModel, path: PathLike) -> Path:
    """保存模型为 JSON；相同模型得到逐字节相同的文件"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(model_to_dict(model), f, indent=2, ensure_ascii=False)
        f.write('\n')
    logger.info(f'模型已保存: {path}')
    return path


def load_model(path: PathLike) -> FactorModel:
    """读取模型 JSON"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise DataFormatError(f'模型文件不存在: {path}')
    except json.JSONDecodeError as e:
        raise DataFormatError(f'模型文件不是有效的 JSON: {e}')
    if not isinstance(data, dict):
        raise DataFormatError('模型文件顶层必须是对象')
    return model_from_dict(data)


def trace_frame(trace: FitTrace) -> pd.DataFrame:
    return pd.DataFrame({
        'iteration': np.arange(1, trace.iterations_run + 1),
        'loglik': trace.loglik_per_iter,
        'expected_loglik_q': trace.q_per_iter,
    })


def write_trace(trace: FitTrace, path: PathLike) -> Path:
    """写出每次迭代的对数似然与 Q"""
    path = Path(path)
    trace_frame(trace).to_csv(path, index=False, float_format=config.PIPELINE['float_format'], lineterminator='\n')
    return path


def file_digest(path: PathLike) -> str:
    """文件的 SHA-256 摘要"""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """一次运行的清单：参数回显、输入摘要、种子、版本、耗时与最终似然"""
    command: str
    flags: Dict = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)   # 路径 -> sha256
    seed: Optional[int] = None
    tool_version: str = config.VERSION
    duration_seconds: float = 0.0
    final_loglik: Optional[float] = None
    final_expected_loglik_q: Optional[float] = None
    iterations_run: Optional[int] = None
    converged_by_tol: Optional[bool] = None
    ingest: Dict = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)

    def add_input(self, path: PathLike):
        self.inputs[str(path)] = file_digest(path)

    def to_dict(self) -> Dict:
        return {
            'command': self.command,
            'flags': self.flags,
            'inputs': self.inputs,
            'seed': self.seed,
            'tool_version': self.tool_version,
            'duration_seconds': self.duration_seconds,
            'final_loglik': self.final_loglik,
            'final_expected_loglik_q': self.final_expected_loglik_q,
            'iterations_run': self.iterations_run,
            'converged_by_tol': self.converged_by_tol,
            'ingest': self.ingest,
            'outputs': self.outputs,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'RunManifest':
        return cls(**data)

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)
            f.write('\n')
        return path

    @classmethod
    def load(cls, path: PathLike) -> 'RunManifest':
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))
