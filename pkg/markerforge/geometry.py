# markerforge/geometry.py
"""
平面变换与双视图极线几何
包括仿射变换、单应性、薄板样条(TPS)、基础矩阵与对称极线距离(SED)

坐标约定：
- 像素坐标以像素中心为整数点，x 向右，y 向下
- 归一化坐标 [-1, 1] 与像素坐标的换算为 x_n = 2x / (w - 1) - 1，
  即图像四角的像素中心分别落在 ±1 上
- 所有变换均为 标记图 -> 参考图 的正向映射
"""
import math
import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Any, NamedTuple, Sequence, Tuple, Union

import numpy as np

from .errors import (DataError, DegenerateTransformError, DegenerateConfigurationError,
                     ConditioningError, EpipoleDegenerateError, InvariantViolation)

logger = logging.getLogger(__name__)

DEFAULT_MAX_CONDITION = 1e10

# TPS 控制点：x ∈ {-0.6, 0, 0.6}，y ∈ {-0.5, 0.5}，先上排后下排
TPS_CONTROL_POINTS = np.array([
    [-0.6, -0.5], [0.0, -0.5], [0.6, -0.5],
    [-0.6, 0.5], [0.0, 0.5], [0.6, 0.5],
])

TRANSFORM_KINDS = ('affine', 'homography', 'tps')

# 三点共线判定的相对阈值
_COLLINEAR_EPS = 1e-10
# 极线退化判定的相对阈值
_LINE_EPS = 1e-12
# 秩2判定：最小奇异值 < 1e-6 × 最大奇异值
_RANK_EPS = 1e-6


class Point2(NamedTuple):
    """二维点（像素或归一化坐标）"""
    x: float
    y: float


def _as_points(points: Union[Sequence, np.ndarray]) -> np.ndarray:
    """转换为 (N, 2) 的 float64 数组"""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError(f"点集形状应为 (N, 2)，实际为 {arr.shape}")
    return arr


def _point_from_array(arr: np.ndarray) -> Point2:
    x, y = float(arr[0]), float(arr[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise DegenerateTransformError(f"变换结果不是有限值: ({x}, {y})")
    return Point2(x, y)


def to_normalized(points: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """像素坐标 -> 归一化坐标"""
    w, h = size
    scale = np.array([2.0 / (w - 1), 2.0 / (h - 1)])
    return points * scale - 1.0


def from_normalized(points: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """归一化坐标 -> 像素坐标"""
    w, h = size
    scale = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    return (points + 1.0) * scale


# ---------------------------------------------------------------------------
# 仿射变换
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AffineTransform:
    """
    仿射变换，按 缩放 -> 剪切 -> 旋转 -> 平移 的顺序组合

    剪切角 φ 表示变换后 y 轴相对 x 轴偏离垂直方向的角度，
    线性部分为 s · [[cos θ, -sin(θ+φ)], [sin θ, cos(θ+φ)]]，行列式 s² cos φ
    """
    rotation_angle: float
    shear_angle: float
    scale: float
    translation: Point2
    matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        theta, phi, s = self.rotation_angle, self.shear_angle, self.scale
        tx, ty = self.translation
        matrix = np.array([
            [s * math.cos(theta), -s * math.sin(theta + phi), tx],
            [s * math.sin(theta), s * math.cos(theta + phi), ty],
        ])
        if not np.all(np.isfinite(matrix)):
            raise DegenerateTransformError(f"仿射参数不是有限值: {self.params()}")
        det = matrix[0, 0] * matrix[1, 1] - matrix[0, 1] * matrix[1, 0]
        if abs(det) <= 1e-12:
            raise DegenerateTransformError(f"仿射变换线性部分奇异，行列式 {det:.3e}")
        matrix.setflags(write=False)
        object.__setattr__(self, 'matrix', matrix)
        object.__setattr__(self, 'translation', Point2(float(tx), float(ty)))

    @classmethod
    def from_params(cls, params: Sequence[float]) -> 'AffineTransform':
        """从 (θ, φ, s, tx, ty) 构造"""
        if len(params) != 5:
            raise DataError(f"仿射变换需要5个参数，实际为 {len(params)}")
        theta, phi, s, tx, ty = (float(v) for v in params)
        return cls(theta, phi, s, Point2(tx, ty))

    @classmethod
    def identity(cls) -> 'AffineTransform':
        return cls(0.0, 0.0, 1.0, Point2(0.0, 0.0))

    def params(self) -> List[float]:
        return [float(self.rotation_angle), float(self.shear_angle), float(self.scale),
                float(self.translation.x), float(self.translation.y)]

    def linear_part(self) -> np.ndarray:
        return self.matrix[:, :2]

    def map_points(self, points: np.ndarray) -> np.ndarray:
        m = self.matrix
        x, y = points[:, 0], points[:, 1]
        return np.stack([m[0, 0] * x + m[0, 1] * y + m[0, 2],
                         m[1, 0] * x + m[1, 1] * y + m[1, 2]], axis=1)

    def inverse_map_points(self, points: np.ndarray) -> np.ndarray:
        inv = np.linalg.inv(self.linear_part())
        shifted = points - self.matrix[:, 2]
        return shifted @ inv.T


# ---------------------------------------------------------------------------
# 单应性
# ---------------------------------------------------------------------------

def _normalize_homography_matrix(m: np.ndarray) -> np.ndarray:
    """右下角非零时令其为1，否则归一化为单位 Frobenius 范数"""
    norm = np.linalg.norm(m)
    if not np.isfinite(norm) or norm == 0:
        raise DegenerateTransformError("单应矩阵为零或包含非有限值")
    if abs(m[2, 2]) > 1e-12 * norm:
        return m / m[2, 2]
    return m / norm


@dataclass(frozen=True, eq=False)
class Homography:
    """3×3 单应矩阵（行优先），已归一化"""
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise DataError(f"单应矩阵形状应为 (3, 3)，实际为 {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, 'matrix', m)

    @classmethod
    def from_matrix(cls, matrix: Union[Sequence, np.ndarray],
                    max_condition: float = DEFAULT_MAX_CONDITION) -> 'Homography':
        """
        归一化并检查可逆性

        Args:
            matrix: 3×3 矩阵
            max_condition: 条件数上限

        Returns:
            Homography对象
        """
        m = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
        m = _normalize_homography_matrix(m)
        cond = np.linalg.cond(m)
        if not np.isfinite(cond):
            raise DegenerateTransformError("单应矩阵奇异")
        if cond > max_condition:
            raise ConditioningError(f"单应矩阵条件数 {cond:.3e} 超过上限 {max_condition:.1e}")
        return cls(m)

    @classmethod
    def identity(cls) -> 'Homography':
        return cls(np.eye(3))

    def params(self) -> List[float]:
        return [float(v) for v in self.matrix.reshape(-1)]

    def map_points(self, points: np.ndarray) -> np.ndarray:
        """映射点集；经过无穷远线的点返回非有限值"""
        return _apply_homography_matrix(self.matrix, points)

    def inverse_map_points(self, points: np.ndarray) -> np.ndarray:
        return _apply_homography_matrix(np.linalg.inv(self.matrix), points)


def _apply_homography_matrix(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    x, y = points[:, 0], points[:, 1]
    u = m[0, 0] * x + m[0, 1] * y + m[0, 2]
    v = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.stack([u / w, v / w], axis=1)


def _hartley_normalization(points: np.ndarray) -> np.ndarray:
    """
    计算 Hartley 归一化矩阵（支持批量）

    Args:
        points: (..., N, 2)

    Returns:
        (..., 3, 3) 归一化矩阵
    """
    centroid = points.mean(axis=-2)
    dist = np.linalg.norm(points - centroid[..., None, :], axis=-1).mean(axis=-1)
    scale = np.where(dist > 0, math.sqrt(2.0) / np.where(dist > 0, dist, 1.0), 1.0)
    t = np.zeros(points.shape[:-2] + (3, 3))
    t[..., 0, 0] = scale
    t[..., 1, 1] = scale
    t[..., 0, 2] = -scale * centroid[..., 0]
    t[..., 1, 2] = -scale * centroid[..., 1]
    t[..., 2, 2] = 1.0
    return t


def dlt_batch(src: np.ndarray, dst: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    归一化 DLT（支持批量）

    Args:
        src: (K, N, 2) 源点
        dst: (K, N, 2) 目标点，N >= 4

    Returns:
        (K, 3, 3) 未归一化的单应矩阵, (K,) 最后两个奇异值之比（秩亏检查用）
    """
    t_src = _hartley_normalization(src)
    t_dst = _hartley_normalization(dst)
    ones = np.ones(src.shape[:-1] + (1,))
    src_n = np.concatenate([src, ones], axis=-1) @ np.swapaxes(t_src, -1, -2)
    dst_n = np.concatenate([dst, ones], axis=-1) @ np.swapaxes(t_dst, -1, -2)

    k, n = src.shape[0], src.shape[1]
    x, y = src_n[..., 0], src_n[..., 1]
    u, v = dst_n[..., 0], dst_n[..., 1]
    zeros = np.zeros_like(x)
    rows_u = np.stack([-x, -y, -np.ones_like(x), zeros, zeros, zeros, u * x, u * y, u], axis=-1)
    rows_v = np.stack([zeros, zeros, zeros, -x, -y, -np.ones_like(x), v * x, v * y, v], axis=-1)
    a = np.stack([rows_u, rows_v], axis=2).reshape(k, 2 * n, 9)

    _, s, vt = np.linalg.svd(a)
    h_n = vt[:, -1, :].reshape(k, 3, 3)
    # 8×9 系统只有8个奇异值，倒数第二个零空间方向用 s[7] 衡量
    smallest = s[:, min(8, 2 * n) - 1]
    ratio = smallest / np.maximum(s[:, 0], 1e-300)
    h = np.linalg.inv(t_dst) @ h_n @ t_src
    return h, ratio


def _check_not_collinear(points: np.ndarray, label: str) -> None:
    scale = max(float(np.max(np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1))), 1e-300)
    for i, j, k in combinations(range(len(points)), 3):
        a, b, c = points[i], points[j], points[k]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area) <= _COLLINEAR_EPS * scale:
            raise DegenerateConfigurationError(f"{label} 中第 {i}, {j}, {k} 个点共线")


def homography_from_four_points(src: Sequence, dst: Sequence,
                                max_condition: float = DEFAULT_MAX_CONDITION) -> Homography:
    """
    由四对点精确求解单应矩阵

    Args:
        src: 4个源点
        dst: 4个目标点
        max_condition: 条件数上限

    Returns:
        Homography对象
    """
    src_arr = _as_points(src)
    dst_arr = _as_points(dst)
    if src_arr.shape != (4, 2) or dst_arr.shape != (4, 2):
        raise DataError("四点单应求解需要恰好4对点")
    if not (np.all(np.isfinite(src_arr)) and np.all(np.isfinite(dst_arr))):
        raise DegenerateConfigurationError("输入点包含非有限值")
    _check_not_collinear(src_arr, "源点")
    _check_not_collinear(dst_arr, "目标点")

    h, ratio = dlt_batch(src_arr[None], dst_arr[None])
    if ratio[0] < 1e-12:
        raise ConditioningError(f"四点线性系统接近奇异，奇异值比 {ratio[0]:.3e}")
    return Homography.from_matrix(h[0], max_condition)


def homography_least_squares(src: np.ndarray, dst: np.ndarray,
                             max_condition: float = DEFAULT_MAX_CONDITION) -> Homography:
    """
    N>=4 对点的归一化 DLT 最小二乘拟合

    Args:
        src: (N, 2) 源点
        dst: (N, 2) 目标点

    Returns:
        Homography对象
    """
    src_arr = _as_points(src)
    dst_arr = _as_points(dst)
    if len(src_arr) < 4 or src_arr.shape != dst_arr.shape:
        raise DataError("最小二乘单应拟合至少需要4对点")
    h, ratio = dlt_batch(src_arr[None], dst_arr[None])
    if len(src_arr) == 4 and ratio[0] < 1e-12:
        raise ConditioningError("线性系统接近奇异")
    return Homography.from_matrix(h[0], max_condition)


# ---------------------------------------------------------------------------
# 薄板样条
# ---------------------------------------------------------------------------

def tps_kernel(d2: np.ndarray) -> np.ndarray:
    """U(r) = r² log(r²)，输入为 r²，U(0) = 0"""
    safe = np.where(d2 > 0, d2, 1.0)
    return np.where(d2 > 0, d2 * np.log(safe), 0.0)


@dataclass(frozen=True, eq=False)
class ThinPlateSpline:
    """
    18参数薄板样条：6个全局仿射参数 + 6个控制点上的二维核权重
    输入输出均为归一化坐标
    """
    affine: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        affine = np.array(self.affine, dtype=np.float64).reshape(2, 3)
        coefficients = np.array(self.coefficients, dtype=np.float64).reshape(6, 2)
        if not (np.all(np.isfinite(affine)) and np.all(np.isfinite(coefficients))):
            raise DegenerateTransformError("TPS参数包含非有限值")
        affine.setflags(write=False)
        coefficients.setflags(write=False)
        object.__setattr__(self, 'affine', affine)
        object.__setattr__(self, 'coefficients', coefficients)

    @property
    def control_points(self) -> np.ndarray:
        return TPS_CONTROL_POINTS

    @classmethod
    def identity(cls) -> 'ThinPlateSpline':
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), np.zeros((6, 2)))

    @classmethod
    def from_params(cls, params: Sequence[float]) -> 'ThinPlateSpline':
        """从 6个仿射参数（行优先）+ 12个核系数（按控制点顺序 wx, wy）构造"""
        if len(params) != 18:
            raise DataError(f"TPS需要18个参数，实际为 {len(params)}")
        values = np.asarray(params, dtype=np.float64)
        return cls(values[:6].reshape(2, 3), values[6:].reshape(6, 2))

    def params(self) -> List[float]:
        return [float(v) for v in self.affine.reshape(-1)] + \
               [float(v) for v in self.coefficients.reshape(-1)]

    def _kernel_matrix(self, points: np.ndarray) -> np.ndarray:
        diff = points[:, None, :] - TPS_CONTROL_POINTS[None, :, :]
        d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2
        return tps_kernel(d2)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """在归一化坐标上求值，返回 (N, 2)"""
        a = self.affine
        x, y = points[:, 0], points[:, 1]
        affine_part = np.stack([a[0, 0] * x + a[0, 1] * y + a[0, 2],
                                a[1, 0] * x + a[1, 1] * y + a[1, 2]], axis=1)
        return affine_part + self._kernel_matrix(points) @ self.coefficients

    def jacobian(self, points: np.ndarray) -> np.ndarray:
        """
        解析雅可比矩阵 (N, 2, 2)
        ∂U/∂p = 2 (p - c)(log r² + 1)，在控制点处取极限 0
        """
        diff = points[:, None, :] - TPS_CONTROL_POINTS[None, :, :]
        d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2
        safe = np.where(d2 > 0, d2, 1.0)
        factor = np.where(d2 > 0, 2.0 * (np.log(safe) + 1.0), 0.0)
        grads = diff * factor[..., None]
        kernel_jac = np.einsum('nkj,ki->nij', grads, self.coefficients)
        return self.affine[None, :, :2] + kernel_jac

    def map_points(self, points: np.ndarray, marker_size, reference_size) -> np.ndarray:
        normalized = to_normalized(points, marker_size)
        return from_normalized(self.evaluate(normalized), reference_size)


def tps_evaluate(tps: ThinPlateSpline, p: Point2) -> Point2:
    """
    在单个归一化坐标点上求值

    Args:
        tps: 薄板样条
        p: 归一化坐标点

    Returns:
        归一化坐标下的结果
    """
    return _point_from_array(tps.evaluate(_as_points([p.x, p.y]))[0])


# ---------------------------------------------------------------------------
# 统一的几何变换
# ---------------------------------------------------------------------------

TransformModel = Union[AffineTransform, Homography, ThinPlateSpline]


@dataclass(frozen=True, eq=False)
class GeometricTransform:
    """标记图坐标 -> 参考图坐标 的几何变换（仿射 / 单应 / TPS 三选一）"""
    model: TransformModel
    marker_size: Tuple[int, int]
    reference_size: Tuple[int, int]

    def __post_init__(self):
        if not isinstance(self.model, (AffineTransform, Homography, ThinPlateSpline)):
            raise DataError(f"未知的变换类型: {type(self.model).__name__}")
        marker_size = (int(self.marker_size[0]), int(self.marker_size[1]))
        reference_size = (int(self.reference_size[0]), int(self.reference_size[1]))
        if min(marker_size) < 2 or min(reference_size) < 2:
            raise DataError(f"图像尺寸必须至少为2: 标记 {marker_size}, 参考 {reference_size}")
        object.__setattr__(self, 'marker_size', marker_size)
        object.__setattr__(self, 'reference_size', reference_size)

    @property
    def kind(self) -> str:
        if isinstance(self.model, AffineTransform):
            return 'affine'
        if isinstance(self.model, Homography):
            return 'homography'
        return 'tps'

    @property
    def invertible(self) -> bool:
        return self.kind != 'tps'

    def map_points(self, points: np.ndarray) -> np.ndarray:
        """批量映射像素坐标，不可映射的点返回非有限值"""
        points = _as_points(points)
        if isinstance(self.model, ThinPlateSpline):
            return self.model.map_points(points, self.marker_size, self.reference_size)
        return self.model.map_points(points)

    def inverse_map_points(self, points: np.ndarray) -> np.ndarray:
        """参考图 -> 标记图 的闭式逆映射（TPS不支持）"""
        if not self.invertible:
            raise DataError("TPS变换没有闭式逆映射")
        return self.model.inverse_map_points(_as_points(points))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'params': self.model.params(),
            'marker_size': list(self.marker_size),
            'reference_size': list(self.reference_size),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GeometricTransform':
        try:
            kind = data['kind']
            params = [float(v) for v in data['params']]
            marker_size = tuple(int(v) for v in data['marker_size'])
            reference_size = tuple(int(v) for v in data['reference_size'])
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"变换JSON格式错误: {e}") from e
        if kind == 'affine':
            model = AffineTransform.from_params(params)
        elif kind == 'homography':
            if len(params) != 9:
                raise DataError(f"单应变换需要9个参数，实际为 {len(params)}")
            model = Homography.from_matrix(np.array(params).reshape(3, 3), max_condition=math.inf)
        elif kind == 'tps':
            model = ThinPlateSpline.from_params(params)
        else:
            raise DataError(f"未知的变换类型: {kind}")
        return cls(model, marker_size, reference_size)


def apply_transform(t: GeometricTransform, p: Point2) -> Point2:
    """
    计算 T(p)，结果为参考图像素坐标

    Args:
        t: 几何变换
        p: 标记图像素坐标

    Returns:
        参考图像素坐标
    """
    return _point_from_array(t.map_points(_as_points([p[0], p[1]]))[0])


# ---------------------------------------------------------------------------
# 极线几何
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """相机内参"""
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DataError(f"焦距必须为正: fx={self.fx}, fy={self.fy}")
        if not all(math.isfinite(v) for v in (self.fx, self.fy, self.cx, self.cy)):
            raise DataError("相机内参包含非有限值")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> 'CameraIntrinsics':
        if len(values) != 4:
            raise DataError(f"内参需要 [fx, fy, cx, cy]，实际为 {values}")
        return cls(*(float(v) for v in values))

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RelativePose:
    """相对位姿：X_b = R X_a + t，t 为单位向量"""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(r.T @ r - np.eye(3))) >= 1e-9 or abs(np.linalg.det(r) - 1.0) >= 1e-9:
            raise DataError("旋转矩阵不是正交矩阵或行列式不为1")
        if abs(np.linalg.norm(t) - 1.0) >= 1e-9:
            raise DataError(f"平移向量必须为单位长度，实际长度 {np.linalg.norm(t):.12f}")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, 'rotation', r)
        object.__setattr__(self, 'translation', t)

    @classmethod
    def from_raw(cls, rotation: Sequence[float], translation: Sequence[float]) -> 'RelativePose':
        """
        从外部（如SfM输出）读入位姿：旋转投影到最近的正交矩阵，平移归一化

        Args:
            rotation: 9个行优先元素
            translation: 3个元素
        """
        r = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        u, _, vt = np.linalg.svd(r)
        projected = u @ vt
        if np.linalg.det(projected) < 0:
            raise DataError("旋转矩阵的行列式为负")
        deviation = float(np.max(np.abs(projected - r)))
        if deviation > 1e-3:
            raise DataError(f"旋转矩阵偏离正交矩阵过多: {deviation:.3e}")
        if deviation > 1e-9:
            logger.warning(f"旋转矩阵已重新正交化，偏差 {deviation:.3e}")
        norm = np.linalg.norm(t)
        if norm == 0 or not np.isfinite(norm):
            raise DataError("平移向量不能为零")
        return cls(projected, t / norm)


def skew(v: Sequence[float]) -> np.ndarray:
    """向量的叉乘矩阵 [v]ₓ"""
    x, y, z = (float(c) for c in v)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class FundamentalMatrix:
    """
    秩2的基础矩阵，约束 x_bᵀ F x_a = 0
    from_matrix / fundamental_from_pose 产生单位 Frobenius 范数的矩阵；
    直接构造时允许任意非零缩放（极线距离与缩放无关）
    """
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)) or not np.any(m):
            raise DataError("基础矩阵为零或包含非有限值")
        s = np.linalg.svd(m, compute_uv=False)
        if s[2] >= _RANK_EPS * s[0]:
            raise InvariantViolation(f"基础矩阵不是秩2: 奇异值 {s}")
        m.setflags(write=False)
        object.__setattr__(self, 'matrix', m)

    @classmethod
    def from_matrix(cls, matrix: Union[Sequence, np.ndarray]) -> 'FundamentalMatrix':
        m = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
        norm = np.linalg.norm(m)
        if norm == 0 or not np.isfinite(norm):
            raise DataError("基础矩阵为零或包含非有限值")
        return cls(m / norm)

    def transposed(self) -> 'FundamentalMatrix':
        return FundamentalMatrix(self.matrix.T)


@dataclass(frozen=True)
class EpipolarLine:
    """极线 ax + by + c = 0"""
    a: float
    b: float
    c: float

    def __post_init__(self):
        norm = math.sqrt(self.a * self.a + self.b * self.b)
        full = math.sqrt(self.a * self.a + self.b * self.b + self.c * self.c)
        if norm == 0 or norm <= _LINE_EPS * full:
            raise EpipoleDegenerateError(f"极线退化: ({self.a}, {self.b}, {self.c})")


def fundamental_from_pose(k_a: CameraIntrinsics, k_b: CameraIntrinsics,
                          pose: RelativePose) -> FundamentalMatrix:
    """
    F = K_b⁻ᵀ [t]ₓ R K_a⁻¹，再归一化为单位 Frobenius 范数

    Args:
        k_a: 图像A的内参
        k_b: 图像B的内参
        pose: A到B的相对位姿

    Returns:
        FundamentalMatrix对象
    """
    essential = skew(pose.translation) @ pose.rotation
    f = k_b.inverse_matrix().T @ essential @ k_a.inverse_matrix()
    return FundamentalMatrix.from_matrix(f)


def epipolar_lines(f: np.ndarray, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """批量计算 F·(x, y, 1)，逐元素运算保证与单点版本逐位一致"""
    x, y = points[:, 0], points[:, 1]
    a = f[0, 0] * x + f[0, 1] * y + f[0, 2]
    b = f[1, 0] * x + f[1, 1] * y + f[1, 2]
    c = f[2, 0] * x + f[2, 1] * y + f[2, 2]
    return a, b, c


def epipolar_distances(x: np.ndarray, x_prime: np.ndarray, f: FundamentalMatrix) -> np.ndarray:
    """
    批量计算点 x' 到极线 F x̃ 的垂直距离，退化极线处为 NaN

    Args:
        x: (N, 2) 图像A中的点
        x_prime: (N, 2) 图像B中的点
        f: 基础矩阵

    Returns:
        (N,) 距离（像素）
    """
    a, b, c = epipolar_lines(f.matrix, x)
    residual = a * x_prime[:, 0] + b * x_prime[:, 1] + c
    norm = np.sqrt(a * a + b * b)
    full = np.sqrt(a * a + b * b + c * c)
    degenerate = (norm == 0) | (norm <= _LINE_EPS * full)
    with np.errstate(divide='ignore', invalid='ignore'):
        dist = np.abs(residual) / norm
    return np.where(degenerate, np.nan, dist)


def sed_values(x: np.ndarray, x_prime: np.ndarray, f: FundamentalMatrix) -> np.ndarray:
    """批量 SED = ED(x, x', F) + ED(x', x, Fᵀ)，退化处为 NaN"""
    return epipolar_distances(x, x_prime, f) + epipolar_distances(x_prime, x, f.transposed())


def epipolar_line(f: FundamentalMatrix, x: Point2) -> EpipolarLine:
    """
    l' = F x̃

    Args:
        f: 基础矩阵
        x: 图像A中的点

    Returns:
        图像B中的极线
    """
    a, b, c = epipolar_lines(f.matrix, _as_points([x[0], x[1]]))
    return EpipolarLine(float(a[0]), float(b[0]), float(c[0]))


def epipolar_distance(x: Point2, x_prime: Point2, f: FundamentalMatrix) -> float:
    """
    |x'ᵀ F x̃| / √(a² + b²)，x' 到极线的垂直距离（像素）
    """
    value = epipolar_distances(_as_points([x[0], x[1]]), _as_points([x_prime[0], x_prime[1]]), f)[0]
    if math.isnan(value):
        raise EpipoleDegenerateError(f"点 ({x[0]}, {x[1]}) 的极线退化")
    return float(value)


def sed(x: Point2, x_prime: Point2, f: FundamentalMatrix) -> float:
    """对称极线距离 ED(x, x', F) + ED(x', x, Fᵀ)"""
    return epipolar_distance(x, x_prime, f) + epipolar_distance(x_prime, x, f.transposed())
