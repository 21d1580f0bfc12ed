from typing import Optional


class SectorFactorError(Exception):
    """所有错误的基类"""


class DataFormatError(SectorFactorError, ValueError):
    """输入文件格式错误或数据不可用"""


class ModelValidationError(SectorFactorError, ValueError):
    """参数或模型违反约束"""


class NumericalError(SectorFactorError, ArithmeticError):
    """数值计算失败（矩阵非正定等）"""

    def __init__(self, message: str, iteration: Optional[int] = None, row: Optional[int] = None):
        self.base_message = message
        self.iteration = iteration
        self.row = row
        context = []
        if iteration is not None:
            context.append(f'迭代 {iteration}')
        if row is not None:
            context.append(f'行 {row}')
        if context:
            message = f'{message} ({", ".join(context)})'
        super().__init__(message)

    def with_iteration(self, iteration: int) -> 'NumericalError':
        """附加迭代编号后返回新的异常"""
        return NumericalError(self.base_message, iteration=iteration, row=self.row)
