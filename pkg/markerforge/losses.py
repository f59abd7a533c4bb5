# markerforge/losses.py
"""
训练目标：监督损失 L_Syn、对称极线距离损失 L_SED 及二者之和 L_all
同时提供关于预测对应点的解析梯度，供梯度校验和下游优化器使用
"""
import math
import logging
from dataclasses import dataclass, field
from typing import Dict, Any, Optional

import numpy as np

from .errors import DataError, EmptyRegionError
from .geometry import FundamentalMatrix, GeometricTransform, epipolar_lines, sed_values
from .imaging import FlowField, pixel_grid

logger = logging.getLogger(__name__)


@dataclass
class LossReport:
    """损失结果：总和、逐像素均值、逐像素损失图（未使用的像素为 NaN）"""
    total: float
    pixel_count: int
    per_pixel: Optional[np.ndarray] = None
    skipped: int = 0
    components: Dict[str, float] = field(default_factory=dict)
    component_means: Dict[str, float] = field(default_factory=dict)
    weight: float = 1.0
    clip: Optional[float] = None

    @property
    def mean(self) -> float:
        """
        逐像素均值
        组合损失的两个分量定义在不同的像素集合上，均值取各分量均值的加权和，
        pixel_count 只是两个集合的像素数之和
        """
        if self.component_means:
            return self.component_means['l_syn'] + self.weight * self.component_means['l_sed']
        return self.total / self.pixel_count if self.pixel_count else 0.0

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'total': self.total,
            'mean': self.mean,
            'pixel_count': self.pixel_count,
            'skipped_degenerate': self.skipped,
        }
        if self.components:
            data['components'] = dict(self.components)
            data['component_means'] = dict(self.component_means)
            data['sed_weight'] = self.weight
        if self.clip is not None:
            data['sed_clip'] = self.clip
        return data


@dataclass
class FlowGradient:
    """∂L/∂f(x)，形状 (H, W, 2)，无效像素处为0"""
    gradient: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.gradient.shape[:2] != self.valid.shape:
            raise DataError("梯度与掩码尺寸不一致")
        if not np.all(np.isfinite(self.gradient)):
            raise DataError("梯度包含非有限值")


def _transform_targets(flow_pred: FlowField, t: GeometricTransform) -> np.ndarray:
    if flow_pred.size != t.marker_size:
        raise DataError(f"光流尺寸 {flow_pred.size} 与变换的标记尺寸 {t.marker_size} 不一致")
    grid = pixel_grid(flow_pred.width, flow_pred.height)
    return t.map_points(grid.reshape(-1, 2)).reshape(grid.shape)


def _syn_terms(flow_pred: FlowField, t: GeometricTransform):
    target = _transform_targets(flow_pred, t)
    used = flow_pred.valid & np.all(np.isfinite(target), axis=2)
    if not used.any():
        raise EmptyRegionError("预测光流没有有效像素")
    diff = np.where(used[..., None], flow_pred.target - target, 0.0)
    return diff, used


def l_syn(flow_pred: FlowField, t: GeometricTransform) -> LossReport:
    """
    L_Syn = Σ ‖f(x) − T(x)‖₁，对有效像素求和

    Args:
        flow_pred: 预测光流
        t: 真值变换

    Returns:
        LossReport对象
    """
    diff, used = _syn_terms(flow_pred, t)
    values = np.abs(diff[..., 0]) + np.abs(diff[..., 1])
    per_pixel = np.where(used, values, np.nan)
    total = math.fsum(values[used].tolist())
    return LossReport(total=total, pixel_count=int(used.sum()), per_pixel=per_pixel)


def grad_l_syn(flow_pred: FlowField, t: GeometricTransform) -> FlowGradient:
    """逐分量 sign(f(x) − T(x))，零点处的次梯度取0"""
    diff, used = _syn_terms(flow_pred, t)
    return FlowGradient(np.sign(diff) * used[..., None], used)


def _sed_terms(flow_pred: FlowField, f: FundamentalMatrix):
    if flow_pred.valid_count == 0:
        raise EmptyRegionError("预测光流没有有效像素")
    grid = pixel_grid(flow_pred.width, flow_pred.height)
    rows, cols = np.nonzero(flow_pred.valid)
    x = grid[rows, cols]
    x_prime = flow_pred.target[rows, cols]
    return rows, cols, x, x_prime


def l_sed(flow_pred: FlowField, f: FundamentalMatrix, clip: Optional[float] = None) -> LossReport:
    """
    L_SED = Σ SED(x, f(x), F)，对有效像素求和；极线退化的像素跳过并计数

    Args:
        flow_pred: 图像A到图像B的预测光流
        f: 基础矩阵
        clip: 可选的逐像素截断上限（默认不截断）

    Returns:
        LossReport对象
    """
    rows, cols, x, x_prime = _sed_terms(flow_pred, f)
    values = sed_values(x, x_prime, f)
    degenerate = np.isnan(values)
    if clip is not None:
        values = np.minimum(values, clip)
    skipped = int(degenerate.sum())
    if skipped:
        logger.warning(f"{skipped} 个像素的极线退化，已跳过")
    kept = ~degenerate
    if not kept.any():
        raise EmptyRegionError("所有像素的极线均退化")
    per_pixel = np.full((flow_pred.height, flow_pred.width), np.nan)
    per_pixel[rows[kept], cols[kept]] = values[kept]
    total = math.fsum(values[kept].tolist())
    return LossReport(total=total, pixel_count=int(kept.sum()), per_pixel=per_pixel,
                      skipped=skipped, clip=clip)


def grad_l_sed(flow_pred: FlowField, f: FundamentalMatrix, clip: Optional[float] = None) -> FlowGradient:
    """
    SED 关于 x' 的解析梯度

    记 l = F x̃ = (a, b, c)，r = x̃'ᵀ F x̃，n1 = √(a² + b²)；
    l' = Fᵀ x̃' = (a', b', c')，n2 = √(a'² + b'²)，其中 a'、b' 依赖 x'。
    ED(x, x', F) = |r| / n1，ED(x', x, Fᵀ) = |r| / n2，于是
        ∂SED/∂x' = sign(r)·(a, b)·(1/n1 + 1/n2) − |r|/n2³ · (a'F00 + b'F01, a'F10 + b'F11)
    r = 0 处取次梯度0；退化像素和被截断的像素梯度为0
    """
    rows, cols, x, x_prime = _sed_terms(flow_pred, f)
    m = f.matrix
    a, b, c = epipolar_lines(m, x)
    ap, bp, _ = epipolar_lines(m.T, x_prime)
    r = a * x_prime[:, 0] + b * x_prime[:, 1] + c
    n1 = np.sqrt(a * a + b * b)
    n2 = np.sqrt(ap * ap + bp * bp)

    values = sed_values(x, x_prime, f)
    usable = ~np.isnan(values)
    if clip is not None:
        usable &= values <= clip
    n1 = np.where(usable, n1, 1.0)
    n2 = np.where(usable, n2, 1.0)

    sign = np.sign(r)
    inv = 1.0 / n1 + 1.0 / n2
    scale = np.abs(r) / (n2 * n2 * n2)
    gx = sign * a * inv - scale * (ap * m[0, 0] + bp * m[0, 1])
    gy = sign * b * inv - scale * (ap * m[1, 0] + bp * m[1, 1])

    gradient = np.zeros((flow_pred.height, flow_pred.width, 2))
    gradient[rows, cols, 0] = np.where(usable, gx, 0.0)
    gradient[rows, cols, 1] = np.where(usable, gy, 0.0)
    valid = np.zeros((flow_pred.height, flow_pred.width), dtype=bool)
    valid[rows, cols] = usable
    return FlowGradient(gradient, valid)


def l_all(flow_syn: FlowField, t: GeometricTransform, flow_real: FlowField, f: FundamentalMatrix,
          sed_weight: float = 1.0, clip: Optional[float] = None) -> LossReport:
    """
    L_all = L_Syn + w · L_SED（默认 w = 1）

    Args:
        flow_syn: 合成样本上的预测光流
        t: 合成样本的真值变换
        flow_real: 真实图像对上的预测光流
        f: 真实图像对的基础矩阵
        sed_weight: L_SED 的权重

    Returns:
        LossReport对象，components 中包含两个分量
    """
    syn = l_syn(flow_syn, t)
    epi = l_sed(flow_real, f, clip)
    total = syn.total + sed_weight * epi.total
    return LossReport(total=total, pixel_count=syn.pixel_count + epi.pixel_count,
                      skipped=epi.skipped,
                      components={'l_syn': syn.total, 'l_sed': epi.total},
                      component_means={'l_syn': syn.mean, 'l_sed': epi.mean},
                      weight=sed_weight, clip=clip)
