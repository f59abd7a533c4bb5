# markerforge/matcher.py
"""
参考对应估计器
- 稀疏基线：Harris 角点 + 归一化图像块描述子 + RANSAC 单应，再在标记网格上栅格化为稠密光流
- 稠密匹配：高斯金字塔上由粗到细的零均值归一化互相关(ZNCC)搜索
- 估计器注册表：按名字选择估计器，供基准测试与命令行使用
"""
import os
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Any, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.spatial.distance import cdist

from .errors import ConfigError, DataError
from .flow_io import failed_record_path, read_failed_record, read_flo
from .geometry import GeometricTransform, Homography, Point2, dlt_batch, homography_least_squares
from .imaging import FlowField, Image, pixel_grid

logger = logging.getLogger(__name__)

# 响应绝对下限，低于该值视为无梯度
_MIN_RESPONSE = 1e-10
# 描述子范数下限，低于该值视为平坦图像块
_FLAT_PATCH = 1e-8
# RANSAC 每批评估的假设数
_HYPOTHESIS_BATCH = 256
# 稠密匹配最粗层的最小边长
_MIN_LEVEL_SIZE = 16
# 参考窗口方差下限，低于该值视为平坦
_FLAT_VARIANCE = 1e-8
# 最粗层穷举搜索时每批相关矩阵的元素数上限
_EXHAUSTIVE_BUDGET = 2_000_000
# 局部搜索时每批的像素数
_LOCAL_CHUNK = 16384
# 最细层与邻域中值位移相差超过该值（像素）即视为不一致
_OUTLIER_PX = 2.0

FAILED_INSUFFICIENT_MATCHES = 'insufficient matches'
FAILED_INSUFFICIENT_INLIERS = 'insufficient inliers'
FAILED_DEGENERATE_MODEL = 'degenerate model'


@dataclass(frozen=True)
class Keypoint:
    """角点：位置与Harris响应"""
    location: Point2
    response: float


class Match(NamedTuple):
    marker: Keypoint
    reference: Keypoint
    distance: float


@dataclass
class MatchSet:
    """描述子匹配结果，按距离升序"""
    matches: List[Match] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for m in self.matches:
            if m.distance < 0:
                raise DataError(f"匹配距离为负: {m.distance}")
            if m.marker.location in seen:
                raise DataError(f"标记角点被重复匹配: {m.marker.location}")
            seen.add(m.marker.location)

    def __len__(self) -> int:
        return len(self.matches)

    def marker_points(self) -> np.ndarray:
        return np.array([m.marker.location for m in self.matches], dtype=np.float64).reshape(-1, 2)

    def reference_points(self) -> np.ndarray:
        return np.array([m.reference.location for m in self.matches], dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class MatchOutcome:
    """估计结果：成功时带光流，失败时带原因"""
    flow: Optional[FlowField] = None
    reason: Optional[str] = None
    inliers: int = 0
    homography: Optional[Homography] = None

    def __post_init__(self):
        if (self.flow is None) == (self.reason is None):
            raise DataError("MatchOutcome 必须恰好包含光流或失败原因之一")

    @property
    def failed(self) -> bool:
        return self.flow is None

    @classmethod
    def success(cls, flow: FlowField, inliers: int = 0,
                homography: Optional[Homography] = None) -> 'MatchOutcome':
        return cls(flow=flow, inliers=inliers, homography=homography)

    @classmethod
    def failure(cls, reason: str, inliers: int = 0) -> 'MatchOutcome':
        return cls(reason=reason, inliers=inliers)


# ---------------------------------------------------------------------------
# Harris 角点
# ---------------------------------------------------------------------------

def harris_response(gray: np.ndarray, k: float = 0.04, sigma: float = 1.0,
                    integration_sigma: float = 2.0) -> np.ndarray:
    """Harris 响应 R = det(M) − k·tr(M)²，导数用高斯导数滤波"""
    ix = ndimage.gaussian_filter(gray, sigma, order=(0, 1))
    iy = ndimage.gaussian_filter(gray, sigma, order=(1, 0))
    wxx = ndimage.gaussian_filter(ix * ix, integration_sigma)
    wxy = ndimage.gaussian_filter(ix * iy, integration_sigma)
    wyy = ndimage.gaussian_filter(iy * iy, integration_sigma)
    trace = wxx + wyy
    return wxx * wyy - wxy * wxy - k * trace * trace


def detect_corners(img: Image, max_count: int = 1000, k: float = 0.04, sigma: float = 1.0,
                   integration_sigma: float = 2.0, threshold: float = 0.01,
                   nms_radius: int = 5, border: int = 5) -> List[Keypoint]:
    """
    检测Harris角点

    Args:
        img: 输入图像（内部转为灰度）
        max_count: 最多返回的角点数
        threshold: 相对阈值，响应需大于 threshold × 最大响应
        nms_radius: 非极大值抑制半径
        border: 距图像边界的最小距离

    Returns:
        按响应降序排列的角点列表
    """
    response = harris_response(img.to_gray(), k, sigma, integration_sigma)
    peak = float(response.max())
    if peak <= _MIN_RESPONSE:
        return []

    size = 2 * nms_radius + 1
    local_max = ndimage.maximum_filter(response, size=size, mode='constant', cval=-np.inf) == response
    candidates = local_max & (response > threshold * peak) & (response > 0)
    if border > 0:
        candidates[:border, :] = False
        candidates[-border:, :] = False
        candidates[:, :border] = False
        candidates[:, -border:] = False

    ys, xs = np.nonzero(candidates)
    values = response[ys, xs]
    order = np.lexsort((xs, ys, -values))

    # 平台区上可能有多个相等的极大值，贪心地再做一次半径抑制
    suppressed = np.zeros(response.shape, dtype=bool)
    keypoints: List[Keypoint] = []
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        if suppressed[y, x]:
            continue
        keypoints.append(Keypoint(Point2(float(x), float(y)), float(values[i])))
        if len(keypoints) >= max_count:
            break
        suppressed[max(0, y - nms_radius):y + nms_radius + 1, max(0, x - nms_radius):x + nms_radius + 1] = True
    logger.debug(f"检测到 {len(keypoints)} 个角点")
    return keypoints


# ---------------------------------------------------------------------------
# 描述子匹配
# ---------------------------------------------------------------------------

def patch_descriptors(gray: np.ndarray, keypoints: Sequence[Keypoint],
                      size: int = 11) -> Tuple[np.ndarray, List[int]]:
    """
    零均值、单位范数的图像块描述子；图像块越界或平坦的角点被跳过

    Returns:
        (描述子矩阵, 保留的角点下标)
    """
    half = size // 2
    h, w = gray.shape
    rows, kept = [], []
    for i, kp in enumerate(keypoints):
        x, y = int(round(kp.location.x)), int(round(kp.location.y))
        if x < half or y < half or x >= w - half or y >= h - half:
            continue
        patch = gray[y - half:y + half + 1, x - half:x + half + 1].reshape(-1)
        patch = patch - patch.mean()
        norm = np.linalg.norm(patch)
        if norm < _FLAT_PATCH:
            continue
        rows.append(patch / norm)
        kept.append(i)
    desc = np.array(rows).reshape(len(rows), size * size)
    return desc, kept


def match_descriptors(a: Image, pts_a: Sequence[Keypoint], b: Image, pts_b: Sequence[Keypoint],
                      size: int = 11, ratio: float = 0.9) -> MatchSet:
    """
    双向最近邻 + 比率检验

    Args:
        a: 标记图
        pts_a: 标记图角点
        b: 参考图
        pts_b: 参考图角点
        size: 图像块边长
        ratio: 比率检验阈值

    Returns:
        按距离升序的 MatchSet
    """
    desc_a, kept_a = patch_descriptors(a.to_gray(), pts_a, size)
    desc_b, kept_b = patch_descriptors(b.to_gray(), pts_b, size)
    if not kept_a or not kept_b:
        return MatchSet([])

    distances = cdist(desc_a, desc_b, 'euclidean')
    nn_ab = np.argmin(distances, axis=1)
    nn_ba = np.argmin(distances, axis=0)
    matches = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] != i:
            continue
        best = distances[i, j]
        if distances.shape[1] > 1:
            second = np.partition(distances[i], 1)[1]
            if not best < ratio * second:
                continue
        matches.append(Match(pts_a[kept_a[i]], pts_b[kept_b[j]], float(best)))
    matches.sort(key=lambda m: m.distance)
    return MatchSet(matches)


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------

def _adjugate(h: np.ndarray) -> np.ndarray:
    """批量伴随矩阵，与逆矩阵只差一个标量，不会因奇异而抛异常"""
    r0, r1, r2 = h[:, 0], h[:, 1], h[:, 2]
    return np.stack([np.cross(r1, r2), np.cross(r2, r0), np.cross(r0, r1)], axis=-1)


def _project(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    """批量单应映射：h (K, 3, 3)，points (N, 2) -> (K, N, 2)"""
    homog = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    mapped = np.einsum('kij,nj->kni', h, homog)
    with np.errstate(divide='ignore', invalid='ignore'):
        return mapped[..., :2] / mapped[..., 2:3]


def _minimal_sample_ok(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """批量检查四点样本中是否有三点共线"""
    ok = np.ones(len(src), dtype=bool)
    for pts in (src, dst):
        spread = np.max(np.sum((pts[:, :, None, :] - pts[:, None, :, :]) ** 2, axis=-1), axis=(1, 2))
        for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
            ab = pts[:, j] - pts[:, i]
            ac = pts[:, k] - pts[:, i]
            area = np.abs(ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])
            ok &= area > 1e-10 * np.maximum(spread, 1e-300)
    return ok


def symmetric_transfer_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """
    对称转移误差：正向与反向转移误差的均方根

    Args:
        h: (K, 3, 3) 单应矩阵
        src, dst: (N, 2) 对应点

    Returns:
        (K, N) 误差，不可映射处为 NaN
    """
    forward = np.linalg.norm(_project(h, src) - dst[None], axis=-1)
    backward = np.linalg.norm(_project(_adjugate(h), dst) - src[None], axis=-1)
    return np.sqrt((forward * forward + backward * backward) / 2.0)


def ransac_homography(matches: MatchSet, iterations: int, inlier_threshold_px: float,
                      marker_size: Tuple[int, int], reference_size: Tuple[int, int],
                      seed: int = 0, max_condition: float = 1e10) -> MatchOutcome:
    """
    经典RANSAC：四点最小假设，按对称转移误差统计内点，最后在内点上做最小二乘重拟合

    Args:
        matches: 描述子匹配
        iterations: 假设数
        inlier_threshold_px: 内点阈值（像素）
        marker_size: 标记图尺寸，用于栅格化光流
        reference_size: 参考图尺寸
        seed: 随机种子

    Returns:
        MatchOutcome，成功时光流为单应在标记网格上的取值
    """
    n = len(matches)
    if n < 4:
        return MatchOutcome.failure(FAILED_INSUFFICIENT_MATCHES)
    src = matches.marker_points()
    dst = matches.reference_points()

    # 顺序生成样本，迭代次数增加时前缀不变
    rng = np.random.default_rng(seed)
    samples = np.array([rng.choice(n, 4, replace=False) for _ in range(iterations)], dtype=np.int64)
    counts = np.full(iterations, -1, dtype=np.int64)
    for start in range(0, iterations, _HYPOTHESIS_BATCH):
        idx = samples[start:start + _HYPOTHESIS_BATCH]
        s, d = src[idx], dst[idx]
        ok = _minimal_sample_ok(s, d)
        if not ok.any():
            continue
        h, ratio = dlt_batch(s[ok], d[ok])
        errors = symmetric_transfer_error(h, src, dst)
        with np.errstate(invalid='ignore'):
            inlier_counts = np.sum(errors < inlier_threshold_px, axis=1)
        inlier_counts[ratio < 1e-12] = -1
        batch_counts = np.full(len(idx), -1, dtype=np.int64)
        batch_counts[ok] = inlier_counts
        counts[start:start + len(idx)] = batch_counts

    best = int(np.argmax(counts))
    best_count = int(counts[best])
    if best_count < 4:
        return MatchOutcome.failure(FAILED_INSUFFICIENT_INLIERS, max(best_count, 0))

    s, d = src[samples[best]], dst[samples[best]]
    h, _ = dlt_batch(s[None], d[None])
    with np.errstate(invalid='ignore'):
        inliers = symmetric_transfer_error(h, src, dst)[0] < inlier_threshold_px
    try:
        model = homography_least_squares(src[inliers], dst[inliers], max_condition)
    except DataError as e:
        logger.debug(f"内点重拟合失败: {e}")
        return MatchOutcome.failure(FAILED_DEGENERATE_MODEL, best_count)

    transform = GeometricTransform(model, marker_size, reference_size)
    flow = FlowField.from_transform(transform, within_reference=False)
    logger.debug(f"RANSAC: {n} 个匹配，{best_count} 个内点")
    return MatchOutcome.success(flow, best_count, model)


# ---------------------------------------------------------------------------
# 稠密匹配
# ---------------------------------------------------------------------------

@dataclass
class _MarkerWindows:
    """标记图各像素的相关窗口，截断到标记内部"""
    patches: np.ndarray
    mask: np.ndarray
    count: np.ndarray

    def take(self, index) -> '_MarkerWindows':
        return _MarkerWindows(self.patches[index], self.mask[index], self.count[index])


def _marker_windows(img: np.ndarray, radius: int) -> _MarkerWindows:
    """
    标记窗口只保留落在图像内部的偏移，在这些偏移上做零均值、单位范数归一化；
    窗口外的位置为0，参考图一侧按同一掩膜计算均值和方差

    Args:
        img: 灰度标记图
        radius: 窗口半径

    Returns:
        _MarkerWindows，patches / mask 形状为 (N, (2r+1)²)
    """
    size = 2 * radius + 1
    img = img.astype(np.float64)
    patches = sliding_window_view(np.pad(img, radius), (size, size)).reshape(-1, size * size)
    mask = sliding_window_view(np.pad(np.ones_like(img), radius), (size, size)).reshape(-1, size * size)
    count = mask.sum(axis=1)
    centered = (patches - (patches.sum(axis=1) / count)[:, None]) * mask
    norms = np.linalg.norm(centered, axis=1)
    safe = np.where(norms > _FLAT_PATCH, norms, 1.0)
    normalized = np.where((norms > _FLAT_PATCH)[:, None], centered / safe[:, None], 0.0)
    return _MarkerWindows(normalized, mask, count)


class _ReferenceWindows:
    """参考图的原始窗口（反射填充），按需取出"""

    def __init__(self, img: np.ndarray, radius: int):
        size = 2 * radius + 1
        self.shape = img.shape
        self.size = size
        self.padded = np.pad(img.astype(np.float64), radius, mode='reflect')
        dy, dx = np.mgrid[0:size, 0:size]
        self._dy = dy.reshape(-1)
        self._dx = dx.reshape(-1)

    def all(self) -> np.ndarray:
        return sliding_window_view(self.padded, (self.size, self.size)).reshape(-1, self.size * self.size)

    def at(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        return self.padded[ys[:, None] + self._dy[None], xs[:, None] + self._dx[None]]


def _zncc_from_sums(num: np.ndarray, s1: np.ndarray, s2: np.ndarray, count: np.ndarray) -> np.ndarray:
    """由 Σp̂q、Σq、Σq²（均在标记掩膜内）得到ZNCC，参考窗口平坦时为0"""
    var = s2 - s1 * s1 / count
    with np.errstate(divide='ignore', invalid='ignore'):
        corr = num / np.sqrt(var)
    return np.where(var > _FLAT_VARIANCE, np.clip(corr, -1.0, 1.0), 0.0)


def _gaussian_pyramid(gray: np.ndarray, levels: int) -> List[np.ndarray]:
    pyramid = [gray]
    for _ in range(levels - 1):
        prev = pyramid[-1]
        if min(prev.shape) // 2 < _MIN_LEVEL_SIZE:
            break
        pyramid.append(ndimage.gaussian_filter(prev, 1.0)[::2, ::2])
    return pyramid


def _parabola_offset(minus: np.ndarray, center: np.ndarray, plus: np.ndarray) -> np.ndarray:
    """三点抛物线拟合的峰值偏移，限制在 ±0.5"""
    denom = minus - 2.0 * center + plus
    with np.errstate(divide='ignore', invalid='ignore'):
        offset = np.where(denom < 0, (minus - plus) / (2.0 * denom), 0.0)
    offset = np.where(np.isfinite(offset), offset, 0.0)
    return np.clip(offset, -0.5, 0.5)


def _exhaustive_search(windows: _MarkerWindows,
                       ref: _ReferenceWindows) -> Tuple[np.ndarray, np.ndarray]:
    """最粗层：每个标记像素与全部参考像素比较"""
    rh, rw = ref.shape
    q = ref.all()
    q_t, q_sq_t = q.T, (q * q).T
    n = len(windows.count)
    chunk = max(1, _EXHAUSTIVE_BUDGET // len(q))
    targets = np.zeros((n, 2))
    peaks = np.zeros(n)
    for start in range(0, n, chunk):
        part = windows.take(slice(start, start + chunk))
        scores = _zncc_from_sums(part.patches @ q_t, part.mask @ q_t, part.mask @ q_sq_t,
                                 part.count[:, None])
        rows = np.arange(len(scores))
        best = np.argmax(scores, axis=1)
        by, bx = np.divmod(best, rw)
        center = scores[rows, best]
        dx = np.zeros(len(scores))
        dy = np.zeros(len(scores))
        inner_x = (bx > 0) & (bx < rw - 1)
        inner_y = (by > 0) & (by < rh - 1)
        dx[inner_x] = _parabola_offset(scores[rows, best - 1][inner_x], center[inner_x],
                                       scores[rows, np.minimum(best + 1, rh * rw - 1)][inner_x])
        dy[inner_y] = _parabola_offset(scores[rows, np.maximum(best - rw, 0)][inner_y], center[inner_y],
                                       scores[rows, np.minimum(best + rw, rh * rw - 1)][inner_y])
        targets[start:start + len(scores), 0] = bx + dx
        targets[start:start + len(scores), 1] = by + dy
        peaks[start:start + len(scores)] = center
    return targets, peaks


def _local_search(windows: _MarkerWindows, ref: _ReferenceWindows, predicted: np.ndarray,
                  radius: int) -> Tuple[np.ndarray, np.ndarray]:
    """在预测位置周围 ±radius 的整数偏移上搜索ZNCC峰值，并做亚像素细化"""
    rh, rw = ref.shape
    n = len(windows.count)
    side = 2 * radius + 1
    offsets = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    base = np.rint(predicted).astype(np.int64)
    targets = np.zeros((n, 2))
    peaks = np.full(n, -np.inf)

    for start in range(0, n, _LOCAL_CHUNK):
        stop = min(start + _LOCAL_CHUNK, n)
        part = windows.take(slice(start, stop))
        bx, by = base[start:stop, 0], base[start:stop, 1]
        scores = np.full((len(offsets), stop - start), -np.inf)
        for k, (dy, dx) in enumerate(offsets):
            cx, cy = bx + dx, by + dy
            inside = (cx >= 0) & (cx < rw) & (cy >= 0) & (cy < rh)
            q = ref.at(np.clip(cy, 0, rh - 1), np.clip(cx, 0, rw - 1))
            corr = _zncc_from_sums(np.einsum('ij,ij->i', part.patches, q), np.einsum('ij,ij->i', part.mask, q),
                                   np.einsum('ij,ij->i', part.mask, q * q), part.count)
            scores[k] = np.where(inside, corr, -np.inf)

        best = np.argmax(scores, axis=0)
        cols = np.arange(stop - start)
        center = scores[best, cols]
        oy, ox = np.divmod(best, side)
        grid = scores.reshape(side, side, -1)
        dx = np.zeros(stop - start)
        dy = np.zeros(stop - start)
        inner_x = (ox > 0) & (ox < side - 1)
        inner_y = (oy > 0) & (oy < side - 1)
        if inner_x.any():
            left = grid[oy, np.maximum(ox - 1, 0), cols]
            right = grid[oy, np.minimum(ox + 1, side - 1), cols]
            use = inner_x & np.isfinite(left) & np.isfinite(right)
            dx[use] = _parabola_offset(left[use], center[use], right[use])
        if inner_y.any():
            up = grid[np.maximum(oy - 1, 0), ox, cols]
            down = grid[np.minimum(oy + 1, side - 1), ox, cols]
            use = inner_y & np.isfinite(up) & np.isfinite(down)
            dy[use] = _parabola_offset(up[use], center[use], down[use])
        targets[start:stop, 0] = bx + ox - radius + dx
        targets[start:stop, 1] = by + oy - radius + dy
        peaks[start:stop] = center
    return targets, peaks


def _upsample_displacement(disp: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """把上一层的位移场插值到本层尺寸并乘以2"""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [ys / 2.0, xs / 2.0]
    out = np.empty((h, w, 2))
    for c in range(2):
        out[..., c] = 2.0 * ndimage.map_coordinates(disp[..., c], coords, order=1, mode='nearest')
    return out


def _median_displacement(disp: np.ndarray, size: int) -> np.ndarray:
    return np.stack([ndimage.median_filter(disp[..., c], size=size, mode='nearest') for c in range(2)], axis=2)


def _replace_outliers(disp: np.ndarray, peaks: np.ndarray, windows: _MarkerWindows, ref: _ReferenceWindows,
                      median_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    最细层的一致性检查：与邻域中值相差超过 _OUTLIER_PX 的像素，
    在中值位移附近 ±1 像素重新搜索峰值

    Returns:
        (位移场, 峰值相关)
    """
    h, w = disp.shape[:2]
    median = _median_displacement(disp, median_size)
    outlier = np.flatnonzero(np.linalg.norm(disp - median, axis=2) > _OUTLIER_PX)
    if len(outlier) == 0:
        return disp, peaks
    grid = pixel_grid(w, h).reshape(-1, 2)
    predicted = grid[outlier] + median.reshape(-1, 2)[outlier]
    targets, new_peaks = _local_search(windows.take(outlier), ref, predicted, 1)
    flat = disp.reshape(-1, 2).copy()
    flat[outlier] = targets - grid[outlier]
    peaks = peaks.copy()
    peaks[outlier] = new_peaks
    logger.debug(f"稠密匹配: {len(outlier)} 个像素与邻域不一致，已按邻域中值重新搜索")
    return flat.reshape(h, w, 2), peaks


def dense_match(marker: Image, reference: Image, levels: int = 4, search_radius: int = 2,
                patch_radius: int = 5, min_correlation: float = 0.2,
                median_size: int = 5) -> FlowField:
    """
    由粗到细的ZNCC稠密匹配

    Args:
        marker: 标记图
        reference: 参考图
        levels: 金字塔层数（最粗层边长不小于16像素）
        search_radius: 细层的局部搜索半径
        patch_radius: 相关窗口半径，标记边界处窗口截断到标记内部
        min_correlation: 峰值相关低于该值的像素标记为无效
        median_size: 层间平滑与最细层一致性检查的中值窗口

    Returns:
        FlowField对象
    """
    pyr_m = _gaussian_pyramid(marker.to_gray(), levels)
    pyr_r = _gaussian_pyramid(reference.to_gray(), levels)
    depth = min(len(pyr_m), len(pyr_r))
    logger.debug(f"稠密匹配: 使用 {depth} 层金字塔")

    disp = None
    peaks = None
    for level in range(depth - 1, -1, -1):
        gm = pyr_m[level]
        mh, mw = gm.shape
        grid = pixel_grid(mw, mh).reshape(-1, 2)
        windows = _marker_windows(gm, patch_radius)
        ref = _ReferenceWindows(pyr_r[level], patch_radius)
        if disp is None:
            targets, peaks = _exhaustive_search(windows, ref)
        else:
            predicted = grid + _upsample_displacement(disp, (mh, mw)).reshape(-1, 2)
            targets, peaks = _local_search(windows, ref, predicted, search_radius)
        disp = (targets - grid).reshape(mh, mw, 2)
        if level > 0:
            disp = _median_displacement(disp, median_size)
        else:
            disp, peaks = _replace_outliers(disp, peaks, windows, ref, median_size)

    h, w = marker.height, marker.width
    valid = (peaks >= min_correlation).reshape(h, w)
    target = pixel_grid(w, h) + disp
    flow = FlowField(target, valid)
    logger.debug(f"稠密匹配完成: {flow.valid_count}/{w * h} 个像素有效")
    return flow


# ---------------------------------------------------------------------------
# 估计器注册表
# ---------------------------------------------------------------------------

@dataclass
class EstimatorContext:
    """估计器的附加输入"""
    sample_id: str = ''
    gt_flow: Optional[FlowField] = None
    flow_dir: Optional[str] = None
    seed: int = 0
    settings: Dict[str, Any] = field(default_factory=dict)

    def setting(self, key: str, default: Any) -> Any:
        return self.settings.get(key, default)


Estimator = Callable[[Image, Image, EstimatorContext], MatchOutcome]


def estimate_homography(marker: Image, reference: Image, ctx: EstimatorContext) -> MatchOutcome:
    """Harris + 描述子 + RANSAC 单应"""
    corner_args = dict(max_count=ctx.setting('max_corners', 1000), k=ctx.setting('harris_k', 0.04),
                       sigma=ctx.setting('harris_sigma', 1.0),
                       integration_sigma=ctx.setting('integration_sigma', 2.0),
                       threshold=ctx.setting('threshold', 0.01), nms_radius=ctx.setting('nms_radius', 5),
                       border=max(ctx.setting('nms_radius', 5), ctx.setting('descriptor_size', 11) // 2))
    pts_m = detect_corners(marker, **corner_args)
    pts_r = detect_corners(reference, **corner_args)
    matches = match_descriptors(marker, pts_m, reference, pts_r,
                                ctx.setting('descriptor_size', 11), ctx.setting('ratio_test', 0.9))
    logger.debug(f"[{ctx.sample_id}] 角点 {len(pts_m)}/{len(pts_r)}，匹配 {len(matches)}")
    return ransac_homography(matches, ctx.setting('ransac_iterations', 2000),
                             ctx.setting('ransac_threshold', 3.0), marker.size, reference.size,
                             seed=ctx.seed, max_condition=ctx.setting('max_condition_number', 1e10))


def estimate_dense(marker: Image, reference: Image, ctx: EstimatorContext) -> MatchOutcome:
    """由粗到细ZNCC"""
    flow = dense_match(marker, reference, ctx.setting('levels', 4), ctx.setting('search_radius', 2),
                       ctx.setting('patch_radius', 5), ctx.setting('min_correlation', 0.2),
                       ctx.setting('median_size', 5))
    if flow.valid_count == 0:
        return MatchOutcome.failure('no confident pixels')
    return MatchOutcome.success(flow)


def estimate_ground_truth(marker: Image, reference: Image, ctx: EstimatorContext) -> MatchOutcome:
    """真值光流（上界参照）"""
    if ctx.gt_flow is None:
        return MatchOutcome.failure('no ground truth')
    return MatchOutcome.success(ctx.gt_flow)


def estimate_identity(marker: Image, reference: Image, ctx: EstimatorContext) -> MatchOutcome:
    """每个标记像素对应参考图的同一坐标（下界参照）"""
    return MatchOutcome.success(FlowField.identity(marker.width, marker.height))


def estimate_from_directory(marker: Image, reference: Image, ctx: EstimatorContext) -> MatchOutcome:
    """读取外部估计器写出的 <目录>/<样本id>.flo 或对应的失败记录"""
    if not ctx.flow_dir:
        raise ConfigError("flow-dir 估计器需要指定光流目录")
    path = os.path.join(ctx.flow_dir, f"{ctx.sample_id}.flo")
    if os.path.exists(path):
        flow = read_flo(path)
        if flow.size != marker.size:
            raise DataError(f"光流尺寸 {flow.size} 与标记图 {marker.size} 不一致: {path}")
        return MatchOutcome.success(flow)
    if os.path.exists(failed_record_path(path)):
        return MatchOutcome.failure(str(read_failed_record(path).get('reason', 'failed')))
    raise DataError(f"缺少外部估计结果: {path}")


ESTIMATORS: Dict[str, Estimator] = {
    'homography': estimate_homography,
    'dense': estimate_dense,
    'gt': estimate_ground_truth,
    'identity': estimate_identity,
    'flow-dir': estimate_from_directory,
}


def get_estimator(name: str) -> Estimator:
    try:
        return ESTIMATORS[name]
    except KeyError:
        raise ConfigError(f"未知的估计器: {name}，可选值: {sorted(ESTIMATORS)}") from None
