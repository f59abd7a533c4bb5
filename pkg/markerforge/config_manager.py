# markerforge/config_manager.py
"""
配置管理
按 命令行参数 > 配置文件 > 默认值 的优先级解析设置
"""
import os
import logging
from typing import Dict, Any, Optional

from .config_utils import load_settings, normalize_settings, validate_settings

logger = logging.getLogger(__name__)

# 环境变量，控制日志级别
LOG_ENV_VAR = 'MARKERFORGE_LOG'


class ConfigManager:
    """分层配置管理器"""

    def __init__(self, config_path: Optional[str] = None,
                 overrides: Optional[Dict[str, Any]] = None):
        """
        初始化配置管理器

        Args:
            config_path: YAML配置文件路径
            overrides: 命令行覆盖项，值为 None 的键会被忽略
        """
        self.config_path = config_path
        self._settings = load_settings(config_path)
        if overrides:
            self.update_settings(overrides)
        logger.debug(f"配置解析完成，配置文件: {config_path or '(默认)'}")

    def get_settings(self) -> Dict[str, Any]:
        """获取完整设置的副本"""
        return dict(self._settings)

    def get_setting(self, key: str, default: Any = None) -> Any:
        """
        获取单个配置项

        Args:
            key: 配置键
            default: 默认值

        Returns:
            配置值
        """
        return self._settings.get(key, default)

    def update_settings(self, updates: Dict[str, Any]) -> None:
        """
        批量覆盖配置项（命令行层），更新后重新校验

        Args:
            updates: 要更新的配置字典
        """
        updates = {k: v for k, v in updates.items() if v is not None}
        if not updates:
            return
        candidate = dict(self._settings)
        candidate.update(normalize_settings(updates))
        validate_settings(candidate)
        self._settings = candidate
        logger.debug(f"命令行覆盖配置项: {sorted(updates.keys())}")

    def get_log_level(self) -> str:
        """环境变量优先于配置文件中的日志级别"""
        return os.environ.get(LOG_ENV_VAR) or self._settings['log_level']

    def get_sampler_config(self):
        """获取 FlyingMarkers 采样配置的便捷方法"""
        from .flyingmarkers import SamplerConfig
        return SamplerConfig.from_settings(self._settings)

    def get_metric_settings(self) -> Dict[str, Any]:
        """获取 SSIM/PSNR/PCK 相关设置的便捷方法"""
        s = self._settings
        return {
            'ssim_window': s['ssim_window'],
            'ssim_sigma': s['ssim_sigma'],
            'ssim_k1': s['ssim_k1'],
            'ssim_k2': s['ssim_k2'],
            'ssim_dynamic_range': s['ssim_dynamic_range'],
            'psnr_cap': s['psnr_cap'],
            'pck_thresholds': list(s['pck_thresholds']),
            'warp_max_cell_edge': s['warp_max_cell_edge'],
        }

    def get_loss_settings(self) -> Dict[str, Any]:
        """获取损失函数相关设置的便捷方法"""
        return {
            'sed_weight': self._settings['sed_weight'],
            'sed_clip': self._settings['sed_clip'],
        }

    def get_matcher_settings(self) -> Dict[str, Any]:
        """获取匹配器相关设置的便捷方法"""
        s = self._settings
        return {
            'max_corners': s['harris_max_corners'],
            'harris_k': s['harris_k'],
            'harris_sigma': s['harris_sigma'],
            'integration_sigma': s['harris_integration_sigma'],
            'threshold': s['harris_threshold'],
            'nms_radius': s['harris_nms_radius'],
            'descriptor_size': s['descriptor_size'],
            'ratio_test': s['ratio_test'],
            'ransac_iterations': s['ransac_iterations'],
            'ransac_threshold': s['ransac_threshold'],
            'levels': s['dense_levels'],
            'search_radius': s['dense_search_radius'],
            'patch_radius': s['dense_patch_radius'],
            'min_correlation': s['dense_min_correlation'],
            'median_size': s['dense_median_size'],
            'max_condition_number': s['max_condition_number'],
        }
