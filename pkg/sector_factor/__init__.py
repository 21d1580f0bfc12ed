"""带行业结构约束的高斯因子模型"""
from . import config
from .em_engine import EMEngine, FitConfig, FitTrace, e_step, expected_loglik, fit, marginal_loglik
from .exceptions import DataFormatError, ModelValidationError, NumericalError, SectorFactorError
from .models import FactorModel, LoadingMask, ReturnsPanel, Sector, SectorMap, build_mask, implied_covariance
from .synthgen import SynthSpec, simulate

__version__ = config.VERSION

__all__ = [
    'DataFormatError',
    'EMEngine',
    'FactorModel',
    'FitConfig',
    'FitTrace',
    'LoadingMask',
    'ModelValidationError',
    'NumericalError',
    'ReturnsPanel',
    'Sector',
    'SectorFactorError',
    'SectorMap',
    'SynthSpec',
    'build_mask',
    'e_step',
    'expected_loglik',
    'fit',
    'implied_covariance',
    'marginal_loglik',
    'simulate',
]
