# markerforge/imaging.py
"""
统一的图像处理模块
整合了图像容器、PNG读写、双线性采样、光流场、变形渲染以及SSIM/PSNR计算

约定：
- Image.data 为 (高, 宽, 通道) 的 float64 数组，取值通常在 [0, 1]
  计算过程中不截断，仅在保存PNG时截断并量化为8位
- FlowField.target 为每个标记像素在参考图中的绝对坐标，无效像素填充哨兵值
"""
import io
import math
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import DataError, EmptyRegionError
from .geometry import GeometricTransform, Point2
from .utils import atomic_write_bytes

logger = logging.getLogger(__name__)

# 无效像素的哨兵值（光流文件中幅值 > 1e9 即视为无效）
FLOW_SENTINEL = 1e10
FLOW_INVALID_THRESHOLD = 1e9

# 单次光栅化的候选像素上限，控制内存占用
_RASTER_CHUNK = 2_000_000
_BARY_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class Image:
    """图像容器，data 形状为 (高, 宽, 通道)，通道数为1或3"""
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise DataError(f"图像形状应为 (H, W, 1|3)，实际为 {data.shape}")
        if data.shape[0] < 2 or data.shape[1] < 2:
            raise DataError(f"图像尺寸至少为 2×2，实际为 {data.shape[1]}×{data.shape[0]}")
        if not np.all(np.isfinite(data)):
            raise DataError("图像数据包含非有限值")
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    @classmethod
    def from_uint8(cls, array: np.ndarray) -> 'Image':
        return cls(np.asarray(array, dtype=np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        """截断到 [0, 1] 后四舍五入为8位"""
        return np.round(np.clip(self.data, 0.0, 1.0) * 255.0).astype(np.uint8)

    def to_rgb(self) -> 'Image':
        if self.channels == 3:
            return self
        return Image(np.repeat(self.data, 3, axis=2))

    def to_gray(self) -> np.ndarray:
        """灰度 (H, W)，RGB 按 ITU-R 601 权重合成"""
        if self.channels == 1:
            return self.data[:, :, 0].copy()
        return self.data @ np.array([0.299, 0.587, 0.114])

    def resized(self, width: int, height: int) -> 'Image':
        """缩放到指定尺寸（双三次插值，8位精度）"""
        if (width, height) == self.size:
            return self
        img = _to_pil(self).resize((width, height), PILImage.BICUBIC)
        return _from_pil(img)


@dataclass(frozen=True, eq=False)
class ValidRegion:
    """参考图上的有效像素集合"""
    mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise DataError(f"有效区域掩码应为二维，实际为 {mask.shape}")
        mask.setflags(write=False)
        object.__setattr__(self, 'mask', mask)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def size(self) -> Tuple[int, int]:
        return self.mask.shape[1], self.mask.shape[0]

    @classmethod
    def full(cls, width: int, height: int) -> 'ValidRegion':
        return cls(np.ones((height, width), dtype=bool))

    def intersect(self, other: 'ValidRegion') -> 'ValidRegion':
        if self.size != other.size:
            raise DataError(f"有效区域尺寸不一致: {self.size} vs {other.size}")
        return ValidRegion(self.mask & other.mask)


@dataclass(frozen=True, eq=False)
class FlowField:
    """标记图 -> 参考图 的稠密对应：每个标记像素的绝对目标坐标与有效位"""
    target: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        target = np.array(self.target, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if target.ndim != 3 or target.shape[2] != 2 or valid.shape != target.shape[:2]:
            raise DataError(f"光流形状不一致: target {target.shape}, valid {valid.shape}")
        valid &= np.all(np.isfinite(target), axis=2)
        valid &= np.all(np.abs(target) < FLOW_INVALID_THRESHOLD, axis=2)
        target[~valid] = FLOW_SENTINEL
        target.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, 'target', target)
        object.__setattr__(self, 'valid', valid)

    @property
    def width(self) -> int:
        return self.target.shape[1]

    @property
    def height(self) -> int:
        return self.target.shape[0]

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.valid))

    @classmethod
    def identity(cls, width: int, height: int) -> 'FlowField':
        return cls(pixel_grid(width, height), np.ones((height, width), dtype=bool))

    @classmethod
    def from_transform(cls, t: GeometricTransform, within_reference: bool = True) -> 'FlowField':
        """
        在标记图每个像素上求 T(x)

        Args:
            t: 几何变换
            within_reference: 为真时目标落在参考画布外的像素记为无效

        Returns:
            FlowField对象，非有限结果记为无效
        """
        w, h = t.marker_size
        grid = pixel_grid(w, h)
        mapped = t.map_points(grid.reshape(-1, 2)).reshape(h, w, 2)
        valid = np.all(np.isfinite(mapped), axis=2)
        if within_reference:
            ref_w, ref_h = t.reference_size
            with np.errstate(invalid='ignore'):
                valid &= ((mapped[..., 0] >= 0) & (mapped[..., 0] <= ref_w - 1)
                          & (mapped[..., 1] >= 0) & (mapped[..., 1] <= ref_h - 1))
        return cls(mapped, valid)

    def displacement(self) -> np.ndarray:
        """位移 (target - 源坐标)，无效像素为哨兵值"""
        disp = self.target - pixel_grid(self.width, self.height)
        disp[~self.valid] = FLOW_SENTINEL
        return disp

    @classmethod
    def from_displacement(cls, displacement: np.ndarray) -> 'FlowField':
        disp = np.asarray(displacement, dtype=np.float64)
        h, w = disp.shape[:2]
        valid = np.all(np.isfinite(disp), axis=2) & np.all(np.abs(disp) <= FLOW_INVALID_THRESHOLD, axis=2)
        with np.errstate(invalid='ignore'):
            target = np.where(valid[..., None], disp + pixel_grid(w, h), FLOW_SENTINEL)
        return cls(target, valid)


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(H, W, 2) 的像素中心坐标网格，最后一维为 (x, y)"""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys], axis=2).astype(np.float64)


# ---------------------------------------------------------------------------
# PNG读写
# ---------------------------------------------------------------------------

def _from_pil(img: PILImage.Image) -> Image:
    if img.mode in ('L', 'I;16', 'I', 'F'):
        if img.mode != 'L':
            img = img.convert('L')
        return Image.from_uint8(np.asarray(img)[:, :, None])
    if img.mode != 'RGB':
        img = img.convert('RGB')
    return Image.from_uint8(np.asarray(img))


def _to_pil(image: Image) -> PILImage.Image:
    data = image.to_uint8()
    if image.channels == 1:
        return PILImage.fromarray(data[:, :, 0], mode='L')
    return PILImage.fromarray(data, mode='RGB')


def load_image(path: str) -> Image:
    """
    读取图片（PNG或其他Pillow支持的格式）

    Args:
        path: 图片路径

    Returns:
        Image对象
    """
    try:
        with PILImage.open(path) as img:
            img.load()
            return _from_pil(img)
    except FileNotFoundError as e:
        raise DataError(f"图片不存在: {path}") from e
    except (OSError, ValueError) as e:
        raise DataError(f"无法读取图片 {path}: {e}") from e


def encode_png(image: Image) -> bytes:
    """编码为8位PNG，不写入时间戳等元数据，保证字节稳定"""
    buffer = io.BytesIO()
    _to_pil(image).save(buffer, format='PNG', optimize=False, compress_level=6)
    return buffer.getvalue()


def save_png(path: str, image: Image) -> None:
    atomic_write_bytes(path, encode_png(image))


def encode_mask_png(region: ValidRegion) -> bytes:
    buffer = io.BytesIO()
    PILImage.fromarray(region.mask.astype(np.uint8) * 255, mode='L').save(buffer, format='PNG')
    return buffer.getvalue()


def load_mask_png(path: str) -> ValidRegion:
    image = load_image(path)
    return ValidRegion(image.data[:, :, 0] >= 0.5)


# ---------------------------------------------------------------------------
# 双线性采样
# ---------------------------------------------------------------------------

def bilinear_sample_array(data: np.ndarray, xs: np.ndarray,
                          ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    批量双线性采样

    Args:
        data: (H, W, C) 图像数组
        xs: 采样点 x 坐标
        ys: 采样点 y 坐标

    Returns:
        (N, C) 采样值, (N,) 是否在图像内（不在图像内的采样值为0）
    """
    h, w = data.shape[:2]
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    inside = np.isfinite(xs) & np.isfinite(ys) & (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xi = np.where(inside, xs, 0.0)
    yi = np.where(inside, ys, 0.0)
    # 最后一行/列上的整数坐标落在左侧单元的右边界，结果仍然精确
    x0 = np.minimum(np.floor(xi).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(yi).astype(np.int64), h - 2)
    fx = (xi - x0)[:, None]
    fy = (yi - y0)[:, None]
    top = data[y0, x0] * (1.0 - fx) + data[y0, x0 + 1] * fx
    bottom = data[y0 + 1, x0] * (1.0 - fx) + data[y0 + 1, x0 + 1] * fx
    values = top * (1.0 - fy) + bottom * fy
    values[~inside] = 0.0
    return values, inside


def bilinear_sample(img: Image, p: Point2) -> Optional[np.ndarray]:
    """
    在一个点上双线性采样

    Args:
        img: 图像
        p: 像素坐标

    Returns:
        长度为通道数的颜色数组；2×2 邻域超出图像时返回 None
    """
    values, inside = bilinear_sample_array(img.data, np.array([p[0]]), np.array([p[1]]))
    if not inside[0]:
        return None
    return values[0]


# ---------------------------------------------------------------------------
# 变形渲染
# ---------------------------------------------------------------------------

def _mesh_triangles(flow: FlowField) -> Tuple[np.ndarray, np.ndarray]:
    """
    把标记图每个 2×2 单元拆成两个三角形
    返回源顶点 (T, 3, 2) 与目标顶点 (T, 3, 2)，顺序为单元行优先、每单元先上三角后下三角
    """
    h, w = flow.height, flow.width
    grid = pixel_grid(w, h)
    tl = (slice(0, h - 1), slice(0, w - 1))
    tr = (slice(0, h - 1), slice(1, w))
    bl = (slice(1, h), slice(0, w - 1))
    br = (slice(1, h), slice(1, w))

    def corners(arr, order):
        return np.stack([arr[s] for s in order], axis=2).reshape(-1, 3, arr.shape[-1])

    first, second = (tl, tr, bl), (br, bl, tr)
    src = np.stack([corners(grid, first), corners(grid, second)], axis=1).reshape(-1, 3, 2)
    dst = np.stack([corners(flow.target, first), corners(flow.target, second)], axis=1).reshape(-1, 3, 2)
    valid = np.stack([corners(flow.valid[..., None], first)[..., 0].all(axis=1),
                      corners(flow.valid[..., None], second)[..., 0].all(axis=1)], axis=1).reshape(-1)
    return src[valid], dst[valid]


def warp_by_flow(marker: Image, flow: FlowField, reference_size: Tuple[int, int],
                 max_cell_edge: float = 64.0) -> Tuple[Image, ValidRegion]:
    """
    按稠密对应把标记图正向变形到参考画布（网格三角形光栅化 + 双线性采样）

    Args:
        marker: 标记图
        flow: 标记图尺寸的光流场
        reference_size: 参考画布 (宽, 高)
        max_cell_edge: 目标空间中边长超过该值的三角形视为撕裂，跳过

    Returns:
        (变形图 I_w, 覆盖区域)
    """
    if flow.size != marker.size:
        raise DataError(f"光流尺寸 {flow.size} 与标记图尺寸 {marker.size} 不一致")
    ref_w, ref_h = int(reference_size[0]), int(reference_size[1])
    out = np.zeros((ref_h, ref_w, marker.channels))
    covered = np.zeros(ref_h * ref_w, dtype=bool)

    src, dst = _mesh_triangles(flow)
    edges = np.stack([dst[:, 1] - dst[:, 0], dst[:, 2] - dst[:, 1], dst[:, 0] - dst[:, 2]], axis=1)
    edge_len = np.sqrt(np.sum(edges ** 2, axis=2)).max(axis=1)
    ab = dst[:, 1] - dst[:, 0]
    ac = dst[:, 2] - dst[:, 0]
    det = ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0]
    keep = (edge_len <= max_cell_edge) & (np.abs(det) > 1e-12)
    skipped = int(np.count_nonzero(edge_len > max_cell_edge))
    if skipped:
        logger.debug(f"跳过 {skipped} 个撕裂的三角形（边长 > {max_cell_edge}）")
    src, dst, det = src[keep], dst[keep], det[keep]
    ab, ac = ab[keep], ac[keep]

    x_min = np.clip(np.ceil(dst[:, :, 0].min(axis=1)), 0, ref_w)
    x_max = np.clip(np.floor(dst[:, :, 0].max(axis=1)), -1, ref_w - 1)
    y_min = np.clip(np.ceil(dst[:, :, 1].min(axis=1)), 0, ref_h)
    y_max = np.clip(np.floor(dst[:, :, 1].max(axis=1)), -1, ref_h - 1)
    nx = np.maximum(x_max - x_min + 1, 0).astype(np.int64)
    ny = np.maximum(y_max - y_min + 1, 0).astype(np.int64)
    counts = nx * ny
    has_pixels = np.nonzero(counts)[0]

    start = 0
    while start < len(has_pixels):
        # 按三角形顺序分块，先处理的三角形优先
        cum = np.cumsum(counts[has_pixels[start:]])
        stop = start + max(1, int(np.searchsorted(cum, _RASTER_CHUNK, side='right')))
        tri = has_pixels[start:stop]
        start = stop

        n = counts[tri]
        tri_idx = np.repeat(tri, n)
        offsets = np.arange(int(n.sum())) - np.repeat(np.cumsum(n) - n, n)
        px = x_min[tri_idx] + offsets % nx[tri_idx]
        py = y_min[tri_idx] + offsets // nx[tri_idx]

        a = dst[tri_idx, 0]
        apx = px - a[:, 0]
        apy = py - a[:, 1]
        d = det[tri_idx]
        u = (apx * ac[tri_idx, 1] - apy * ac[tri_idx, 0]) / d
        v = (ab[tri_idx, 0] * apy - ab[tri_idx, 1] * apx) / d
        inside = (u >= -_BARY_EPS) & (v >= -_BARY_EPS) & (u + v <= 1.0 + _BARY_EPS)

        pixel_id = (py * ref_w + px).astype(np.int64)[inside]
        u, v, tri_idx = u[inside], v[inside], tri_idx[inside]
        pixel_id, first = np.unique(pixel_id, return_index=True)
        fresh = ~covered[pixel_id]
        pixel_id, first = pixel_id[fresh], first[fresh]
        u, v, tri_idx = u[first], v[first], tri_idx[first]

        s = src[tri_idx]
        sx = s[:, 0, 0] + u * (s[:, 1, 0] - s[:, 0, 0]) + v * (s[:, 2, 0] - s[:, 0, 0])
        sy = s[:, 0, 1] + u * (s[:, 1, 1] - s[:, 0, 1]) + v * (s[:, 2, 1] - s[:, 0, 1])
        sx = np.clip(sx, 0.0, marker.width - 1)
        sy = np.clip(sy, 0.0, marker.height - 1)
        values, _ = bilinear_sample_array(marker.data, sx, sy)
        out.reshape(-1, marker.channels)[pixel_id] = values
        covered[pixel_id] = True

    return Image(out), ValidRegion(covered.reshape(ref_h, ref_w))


def warp_by_transform(marker: Image, t: GeometricTransform,
                      reference_size: Tuple[int, int]) -> Tuple[Image, ValidRegion]:
    """
    闭式逆映射重采样（仅仿射与单应）：对每个参考像素求 T⁻¹(x) 并在标记图上采样

    Args:
        marker: 标记图
        t: 几何变换
        reference_size: 参考画布 (宽, 高)

    Returns:
        (变形图, 有效区域)
    """
    if t.marker_size != marker.size:
        raise DataError(f"变换的标记尺寸 {t.marker_size} 与标记图 {marker.size} 不一致")
    ref_w, ref_h = int(reference_size[0]), int(reference_size[1])
    grid = pixel_grid(ref_w, ref_h).reshape(-1, 2)
    source = t.inverse_map_points(grid)
    values, inside = bilinear_sample_array(marker.data, source[:, 0], source[:, 1])
    return (Image(values.reshape(ref_h, ref_w, marker.channels)),
            ValidRegion(inside.reshape(ref_h, ref_w)))


def composite(background: Image, foreground: Image, region: ValidRegion) -> Image:
    """在有效区域内用前景覆盖背景"""
    if background.size != foreground.size or background.size != region.size:
        raise DataError("合成的图像与掩码尺寸不一致")
    fg = foreground.to_rgb().data if background.channels == 3 else foreground.data
    return Image(np.where(region.mask[..., None], fg, background.data))


# ---------------------------------------------------------------------------
# 评估指标
# ---------------------------------------------------------------------------

def _check_metric_inputs(a: Image, b: Image, region: ValidRegion) -> None:
    if a.data.shape != b.data.shape:
        raise DataError(f"图像尺寸不一致: {a.data.shape} vs {b.data.shape}")
    if region.size != a.size:
        raise DataError(f"有效区域尺寸 {region.size} 与图像尺寸 {a.size} 不一致")
    if region.count == 0:
        raise EmptyRegionError("有效区域为空")


def ssim_map(a: np.ndarray, b: np.ndarray, mask: np.ndarray, window: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> np.ndarray:
    """
    掩码归一化的高斯窗SSIM图（单通道）：窗口统计只使用掩码内的像素

    Args:
        a, b: (H, W) 单通道数组
        mask: (H, W) 布尔掩码

    Returns:
        (H, W) SSIM图，掩码外的值无意义
    """
    radius = window // 2
    truncate = radius / sigma

    def blur(x):
        return ndimage.gaussian_filter(x, sigma=sigma, truncate=truncate, mode='constant', cval=0.0)

    m = mask.astype(np.float64)
    weight = blur(m)
    weight = np.where(weight > 0, weight, 1.0)
    mu_a = blur(m * a) / weight
    mu_b = blur(m * b) / weight
    var_a = blur(m * (a * a)) / weight - mu_a * mu_a
    var_b = blur(m * (b * b)) / weight - mu_b * mu_b
    cov = blur(m * (a * b)) / weight - mu_a * mu_b

    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return numerator / denominator


def ssim_value(a: Image, b: Image, region: ValidRegion, window: int = 11, sigma: float = 1.5,
               k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> float:
    """
    区域内平均SSIM，各通道分别计算后取平均

    Args:
        a, b: 尺寸相同的图像
        region: 有效区域（非空）

    Returns:
        [-1, 1] 内的SSIM
    """
    _check_metric_inputs(a, b, region)
    per_channel = []
    for c in range(a.channels):
        values = ssim_map(a.data[:, :, c], b.data[:, :, c], region.mask,
                          window, sigma, k1, k2, dynamic_range)[region.mask]
        per_channel.append(math.fsum(values.tolist()) / values.size)
    return math.fsum(per_channel) / len(per_channel)


def psnr_value(a: Image, b: Image, region: ValidRegion, cap: float = 99.0,
               dynamic_range: float = 1.0) -> float:
    """
    区域MSE对应的PSNR（dB），MSE为0时返回上限

    Args:
        a, b: 尺寸相同的图像
        region: 有效区域（非空）
        cap: 上限

    Returns:
        PSNR
    """
    _check_metric_inputs(a, b, region)
    diff = (a.data - b.data)[region.mask]
    mse = math.fsum((diff * diff).reshape(-1).tolist()) / diff.size
    if mse == 0:
        return cap
    return min(cap, 10.0 * math.log10(dynamic_range * dynamic_range / mse))
