"""
异常定义
CLI 根据异常类别决定退出码：用法类 1，数值类 2
"""

from typing import Optional


class RayIPDGError(Exception):
    """所有错误的基类"""

    exit_code = 1


class ConfigError(RayIPDGError, ValueError):
    """配置文件或覆盖项错误"""


class UsageError(RayIPDGError):
    """命令行用法错误"""


class MeshError(RayIPDGError, ValueError):
    """网格参数或点定位错误"""


class FieldError(RayIPDGError, ValueError):
    """波速、参考场或源项求值错误"""


class BasisError(RayIPDGError, ValueError):
    """射线基函数或方向集错误"""


class NumericalError(RayIPDGError):
    """数值失败（奇异矩阵、训练发散等）"""

    exit_code = 2


class SingularSystemError(NumericalError):
    """线性系统结构奇异或数值奇异"""


class NonFiniteError(NumericalError):
    """张量中出现 NaN/Inf"""


class TrainingDivergedError(NonFiniteError):
    """训练损失出现 NaN/Inf"""


class NetworkStateError(RayIPDGError):
    """网络在没有缓存前向结果时调用反向传播"""


class PipelineStageError(RayIPDGError):
    """带阶段标签的流水线错误"""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, 'exit_code', 1)
        super().__init__(f"[{stage}] {cause}")


def exit_code_for(error: Optional[BaseException]) -> int:
    """
    异常到退出码的映射

    Args:
        error: 捕获到的异常

    Returns:
        退出码
    """
    if error is None:
        return 0
    return int(getattr(error, 'exit_code', 1))


class IllConditionedWarning(RuntimeWarning):
    """估计条件数超过阈值（通常由近乎重复的射线方向引起）"""
