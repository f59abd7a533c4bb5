# markerforge/config_utils.py
import os
import math
import copy
import logging
from typing import Dict, Any, Optional

import yaml

from .errors import ConfigError

logger = logging.getLogger(__name__)

# 添加版本信息
VERSION = "1.0.0"

# 默认设置
DEFAULT_SETTINGS: Dict[str, Any] = {
    'version': VERSION,

    # --- 运行设置 ---
    'log_level': 'INFO',
    'log_dir': '',           # 为空时不写日志文件
    'seed': 0,
    'workers': 1,
    'image_cache_size': 64,

    # --- FlyingMarkers 采样设置 ---
    'dataset_name': 'flyingmarkers',
    'sample_count': 100,
    'canvas_size': [640, 480],
    'marker_size': None,     # 为空时使用原始尺寸，超过画布一半时等比缩小
    'rotation_range': [-math.pi / 3, math.pi / 3],
    'shear_range': [-math.pi / 2, math.pi / 2],
    'scale_range': [0.75, 1.25],
    'tps_range': [-0.5, 0.5],
    'kind_weights': {'affine': 1.0, 'homography': 1.0, 'tps': 1.0},
    'placement_jitter': 1.0,  # 0 表示居中放置
    'affine_max_retries': 100,
    'homography_max_draws': 1000,
    'homography_min_angle_deg': 20.0,
    'homography_max_angle_deg': 160.0,
    'tps_max_draws': 100,
    'tps_fold_grid': 17,
    'tps_side_conditions': False,  # 为真时核权重投影到边界条件上
    'sample_max_retries': 10,
    'max_condition_number': 1e10,

    # --- 变形渲染 ---
    'warp_max_cell_edge': 64.0,

    # --- 评估指标 ---
    'ssim_window': 11,
    'ssim_sigma': 1.5,
    'ssim_k1': 0.01,
    'ssim_k2': 0.03,
    'ssim_dynamic_range': 1.0,
    'psnr_cap': 99.0,
    'pck_thresholds': [1.0, 3.0, 5.0],

    # --- 损失函数 ---
    'sed_weight': 1.0,
    'sed_clip': None,        # 为空时不截断

    # --- 匹配器 ---
    'harris_max_corners': 1000,
    'harris_k': 0.04,
    'harris_sigma': 1.0,
    'harris_integration_sigma': 2.0,
    'harris_threshold': 0.01,
    'harris_nms_radius': 5,
    'descriptor_size': 11,
    'ratio_test': 0.9,
    'ransac_iterations': 2000,
    'ransac_threshold': 3.0,
    'dense_levels': 4,
    'dense_search_radius': 2,
    'dense_patch_radius': 5,
    'dense_min_correlation': 0.2,
    'dense_median_size': 5,

    # --- 基准测试 ---
    'report_format': 'all',  # 可选值: json, table, all
    'standin_markers': 10,
    'standin_images_per_marker': 10,
    'standin_marker_size': [160, 120],
    'standin_canvas_size': [320, 240],
}

# 默认值为空、需要单独声明类型的设置项
OPTIONAL_SETTINGS = {
    'marker_size': list,
    'sed_clip': float,
}

# 不做类型转换的设置项
_UNTYPED_KEYS = ['version']

REPORT_FORMATS = ['json', 'table', 'all']


def load_settings(path: Optional[str] = None) -> Dict[str, Any]:
    """
    从YAML文件加载设置，并与默认设置合并

    Args:
        path: 配置文件路径，为空时只使用默认设置

    Returns:
        完整的设置字典
    """
    settings = copy.deepcopy(DEFAULT_SETTINGS)
    if not path:
        return settings

    if not os.path.isfile(path):
        raise ConfigError(f"配置文件不存在: {path}")

    try:
        with open(path, 'r', encoding='utf-8') as f:
            loaded = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"读取配置文件失败: {path}: {e}") from e

    # 空文件视为没有覆盖项
    if not loaded:
        logger.debug(f"配置文件为空，使用默认设置: {path}")
        return settings

    if not isinstance(loaded, dict):
        raise ConfigError(f"配置文件顶层必须是映射: {path}")

    settings.update(normalize_settings(loaded))
    settings['version'] = VERSION
    validate_settings(settings)
    logger.info(f"已加载配置文件: {path}")
    return settings


def normalize_settings(raw: Dict[str, Any]) -> Dict[str, Any]:
    """
    拒绝未知设置项，并将取值转换为与默认值一致的类型

    Args:
        raw: 待检查的设置

    Returns:
        类型已规范化的新字典
    """
    unknown = sorted(k for k in raw if k not in DEFAULT_SETTINGS)
    if unknown:
        raise ConfigError(f"未知的设置项: {', '.join(unknown)}")

    normalized = {}
    for key, value in raw.items():
        if key in _UNTYPED_KEYS:
            continue
        normalized[key] = _normalize_value(key, value)
    return normalized


def _normalize_value(key: str, value: Any) -> Any:
    """按默认值的类型转换单个设置项"""
    default_value = DEFAULT_SETTINGS[key]

    if default_value is None:
        if value is None:
            return None
        expected = OPTIONAL_SETTINGS[key]
        if expected is list:
            return _normalize_number_list(key, value, None)
        return _coerce_scalar(key, value, expected)

    if isinstance(default_value, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"设置项 '{key}' 必须是映射，实际为 {value!r}")
        extra = sorted(set(value) - set(default_value))
        if extra:
            raise ConfigError(f"设置项 '{key}' 包含未知的键: {', '.join(extra)}")
        merged = dict(default_value)
        for sub_key, sub_value in value.items():
            merged[sub_key] = _coerce_scalar(f"{key}.{sub_key}", sub_value, float)
        return merged

    if isinstance(default_value, list):
        return _normalize_number_list(key, value, default_value)

    return _coerce_scalar(key, value, type(default_value))


def _normalize_number_list(key, value, default_value):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"设置项 '{key}' 必须是列表，实际为 {value!r}")
    if default_value is not None and len(value) != len(default_value) and key != 'pck_thresholds':
        raise ConfigError(f"设置项 '{key}' 需要 {len(default_value)} 个元素，实际为 {len(value)}")
    element_type = float
    if default_value and all(isinstance(v, int) and not isinstance(v, bool) for v in default_value):
        element_type = int
    if default_value is None:
        element_type = int
    return [_coerce_scalar(key, v, element_type) for v in value]


def _coerce_scalar(key: str, value: Any, expected: type) -> Any:
    try:
        # 布尔值处理
        if expected is bool:
            if isinstance(value, str):
                return value.strip().lower() in ['true', 'yes', '1', 'on']
            return bool(value)
        # 整数处理
        if expected is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("不是整数")
            return int(value)
        # 浮点数处理
        if expected is float:
            return float(value)
        if expected is str:
            return str(value)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"设置项 '{key}' 的值 {value!r} 类型错误: {e}") from e
    return value


def validate_settings(settings: Dict[str, Any]) -> None:
    """
    检查设置之间的约束关系

    Args:
        settings: 完整的设置字典
    """
    for key in ['rotation_range', 'shear_range', 'scale_range', 'tps_range']:
        low, high = settings[key]
        if not (math.isfinite(low) and math.isfinite(high)) or low > high:
            raise ConfigError(f"设置项 '{key}' 的区间无效: {settings[key]}")

    weights = settings['kind_weights']
    if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
        raise ConfigError(f"变换类型权重必须非负且不能全为零: {weights}")

    for key in ['canvas_size', 'standin_marker_size', 'standin_canvas_size']:
        w, h = settings[key]
        if w <= 1 or h <= 1:
            raise ConfigError(f"设置项 '{key}' 的尺寸必须大于1: {settings[key]}")

    if settings['marker_size'] is not None:
        if len(settings['marker_size']) != 2 or min(settings['marker_size']) <= 1:
            raise ConfigError(f"设置项 'marker_size' 无效: {settings['marker_size']}")

    if settings['scale_range'][0] <= 0:
        raise ConfigError("缩放区间必须为正")

    if settings['workers'] < 1:
        raise ConfigError("workers 必须至少为1")

    if settings['sample_count'] < 0:
        raise ConfigError("sample_count 不能为负数")

    if not 0.0 <= settings['placement_jitter'] <= 1.0:
        raise ConfigError("placement_jitter 必须位于 [0, 1]")

    if settings['report_format'] not in REPORT_FORMATS:
        raise ConfigError(f"未知的报告格式: {settings['report_format']}，可选值: {REPORT_FORMATS}")

    if settings['sed_clip'] is not None and settings['sed_clip'] <= 0:
        raise ConfigError("sed_clip 必须为正数")

    if not settings['pck_thresholds'] or any(d <= 0 for d in settings['pck_thresholds']):
        raise ConfigError("pck_thresholds 必须为正数列表")

    if settings['ssim_window'] % 2 != 1:
        raise ConfigError("ssim_window 必须为奇数")

    if settings['descriptor_size'] % 2 != 1:
        raise ConfigError("descriptor_size 必须为奇数")


def save_settings(settings: Dict[str, Any], path: str) -> None:
    """
    保存设置到YAML文件

    Args:
        settings: 设置字典
        path: 目标路径
    """
    data = dict(settings)
    data['version'] = VERSION
    target_dir = os.path.dirname(path)
    if target_dir:
        os.makedirs(target_dir, exist_ok=True)
    try:
        with open(path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(data, f, default_flow_style=False, allow_unicode=True, sort_keys=True)
    except OSError as e:
        raise ConfigError(f"保存设置失败: {path}: {e}") from e
    logger.info(f"设置已保存: {path}")
