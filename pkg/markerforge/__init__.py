# markerforge/__init__.py
"""
markerforge - 标记图到参考图的稠密对应工具链
FlyingMarkers 合成数据、训练损失、参考匹配器与基准测试
"""
from .config_utils import VERSION

__version__ = VERSION
