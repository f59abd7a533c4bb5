# markerforge/errors.py
"""
统一异常定义
库函数只抛出异常，由命令行入口统一转换为退出码
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class MarkerForgeError(Exception):
    """所有工具链异常的基类"""
    exit_code = EXIT_DATA


class ConfigError(MarkerForgeError):
    """配置或命令行参数错误"""
    exit_code = EXIT_USAGE


class DataError(MarkerForgeError):
    """数据错误：文件读写失败、格式不符、尺寸不匹配等"""
    exit_code = EXIT_DATA


class DegenerateTransformError(DataError):
    """变换退化：结果非有限值或矩阵奇异"""


class DegenerateConfigurationError(DataError):
    """点集退化：存在三点共线"""


class ConditioningError(DataError):
    """线性系统病态：条件数超过配置上限"""


class EpipoleDegenerateError(DataError):
    """极线退化：(a, b) = (0, 0)"""


class EmptyRegionError(DataError):
    """有效区域或评估像素集合为空"""


class SamplingError(DataError):
    """随机采样的拒绝次数耗尽"""


class PlacementError(SamplingError):
    """仿射变换后的标记无法放入画布"""


class InvariantViolation(MarkerForgeError):
    """内部不变量被破坏"""
    exit_code = EXIT_INTERNAL
