# markerforge/flyingmarkers.py
"""
FlyingMarkers 合成数据集生成
随机采样仿射 / 单应 / TPS 变换，把标记图变形后贴入背景图，并输出逐像素真值对应

输出目录结构：
    <root>/manifest.json
    <root>/samples/<id>/marker.png, reference.png, flow.flo, mask.png, transform.json
"""
import os
import math
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Any, Optional, Sequence, Tuple

import numpy as np

from .config_utils import VERSION
from .errors import DataError, ConfigError, DegenerateTransformError, PlacementError, SamplingError
from .flow_io import encode_flo
from .geometry import (AffineTransform, Homography, ThinPlateSpline, GeometricTransform, Point2,
                       TPS_CONTROL_POINTS, TRANSFORM_KINDS, homography_from_four_points)
from .image_cache import ImageCache
from .imaging import (Image, FlowField, ValidRegion, warp_by_flow, composite, encode_mask_png, load_image,
                      save_png)
from .monitoring import RunMonitor
from .utils import atomic_write_bytes, dumps_json, write_json, read_json, ensure_dir_exists

logger = logging.getLogger(__name__)

FORMAT_VERSION = 'fm-1'
MANIFEST_NAME = 'manifest.json'
SAMPLE_FILES = ('marker.png', 'reference.png', 'flow.flo', 'mask.png', 'transform.json')

# 每批提交给线程池的样本数（相对 workers 的倍数），控制内存中的样本数量
_BATCH_FACTOR = 4


@dataclass(frozen=True)
class SamplerConfig:
    """FlyingMarkers 采样配置"""
    rotation_range: Tuple[float, float] = (-math.pi / 3, math.pi / 3)
    shear_range: Tuple[float, float] = (-math.pi / 2, math.pi / 2)
    scale_range: Tuple[float, float] = (0.75, 1.25)
    tps_range: Tuple[float, float] = (-0.5, 0.5)
    kind_weights: Dict[str, float] = field(
        default_factory=lambda: {'affine': 1.0, 'homography': 1.0, 'tps': 1.0})
    canvas_size: Tuple[int, int] = (640, 480)
    seed: int = 0
    marker_size: Optional[Tuple[int, int]] = None
    placement_jitter: float = 1.0
    affine_max_retries: int = 100
    homography_max_draws: int = 1000
    homography_min_angle_deg: float = 20.0
    homography_max_angle_deg: float = 160.0
    tps_max_draws: int = 100
    tps_fold_grid: int = 17
    tps_side_conditions: bool = False
    sample_max_retries: int = 10
    max_condition_number: float = 1e10
    warp_max_cell_edge: float = 64.0
    sample_count: int = 100
    dataset_name: str = 'flyingmarkers'

    def __post_init__(self):
        for name in ('rotation_range', 'shear_range', 'scale_range', 'tps_range'):
            low, high = getattr(self, name)
            if not (math.isfinite(low) and math.isfinite(high)) or low > high:
                raise ConfigError(f"{name} 区间无效: ({low}, {high})")
        unknown = sorted(set(self.kind_weights) - set(TRANSFORM_KINDS))
        if unknown:
            raise ConfigError(f"未知的变换类型: {unknown}")
        weights = [self.kind_weights.get(k, 0.0) for k in TRANSFORM_KINDS]
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ConfigError(f"变换类型权重必须非负且不能全为零: {self.kind_weights}")
        if min(self.canvas_size) <= 1:
            raise ConfigError(f"画布尺寸必须大于1: {self.canvas_size}")
        if self.scale_range[0] <= 0:
            raise ConfigError("缩放区间必须为正")

    @classmethod
    def from_settings(cls, settings: Dict[str, Any]) -> 'SamplerConfig':
        """从设置字典构造"""
        marker_size = settings.get('marker_size')
        return cls(
            rotation_range=tuple(settings['rotation_range']),
            shear_range=tuple(settings['shear_range']),
            scale_range=tuple(settings['scale_range']),
            tps_range=tuple(settings['tps_range']),
            kind_weights=dict(settings['kind_weights']),
            canvas_size=tuple(settings['canvas_size']),
            seed=settings['seed'],
            marker_size=tuple(marker_size) if marker_size else None,
            placement_jitter=settings['placement_jitter'],
            affine_max_retries=settings['affine_max_retries'],
            homography_max_draws=settings['homography_max_draws'],
            homography_min_angle_deg=settings['homography_min_angle_deg'],
            homography_max_angle_deg=settings['homography_max_angle_deg'],
            tps_max_draws=settings['tps_max_draws'],
            tps_fold_grid=settings['tps_fold_grid'],
            tps_side_conditions=settings['tps_side_conditions'],
            sample_max_retries=settings['sample_max_retries'],
            max_condition_number=settings['max_condition_number'],
            warp_max_cell_edge=settings['warp_max_cell_edge'],
            sample_count=settings['sample_count'],
            dataset_name=settings['dataset_name'],
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data


@dataclass
class DatasetSample:
    """一个训练样本：标记图、合成参考图、真值变换与稠密对应"""
    sample_id: int
    seed: int
    transform: GeometricTransform
    marker: Image
    reference: Image
    flow: FlowField
    region: ValidRegion
    marker_source: str = ''
    background_source: str = ''

    @property
    def kind(self) -> str:
        return self.transform.kind


@dataclass
class DatasetManifest:
    """数据集清单"""
    name: str
    sample_count: int
    records: List[Dict[str, Any]]
    config: Dict[str, Any]
    format_version: str = FORMAT_VERSION
    version: str = VERSION

    def __post_init__(self):
        if len(self.records) != self.sample_count:
            raise DataError(f"清单记录数 {len(self.records)} 与样本数 {self.sample_count} 不一致")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'format': self.format_version,
            'name': self.name,
            'sample_count': self.sample_count,
            'records': self.records,
            'config': self.config,
            'version': self.version,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DatasetManifest':
        if not isinstance(data, dict) or data.get('format') != FORMAT_VERSION:
            raise DataError(f"不是 {FORMAT_VERSION} 格式的数据集清单")
        try:
            return cls(name=data['name'], sample_count=int(data['sample_count']),
                       records=list(data['records']), config=dict(data['config']),
                       format_version=data['format'], version=data.get('version', ''))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"数据集清单格式错误: {e}") from e

    def save(self, root: str) -> str:
        path = os.path.join(root, MANIFEST_NAME)
        write_json(path, self.to_dict())
        return path

    @classmethod
    def load(cls, root: str) -> 'DatasetManifest':
        path = root if root.endswith('.json') else os.path.join(root, MANIFEST_NAME)
        return cls.from_dict(read_json(path))


# ---------------------------------------------------------------------------
# 随机数
# ---------------------------------------------------------------------------

def derive_sample_seed(master_seed: int, index: int) -> int:
    """样本种子 = SHA-256("主种子:序号") 的前8字节（小端）"""
    digest = hashlib.sha256(f"{master_seed}:{index}".encode('ascii')).digest()
    return int.from_bytes(digest[:8], 'little')


def sample_kind(rng: np.random.Generator, config: SamplerConfig) -> str:
    """按权重选择变换类型"""
    weights = np.array([config.kind_weights.get(k, 0.0) for k in TRANSFORM_KINDS], dtype=np.float64)
    return TRANSFORM_KINDS[int(rng.choice(len(TRANSFORM_KINDS), p=weights / weights.sum()))]


def _uniform(rng: np.random.Generator, bounds: Sequence[float]) -> float:
    low, high = bounds
    return float(rng.uniform(low, high))


# ---------------------------------------------------------------------------
# 仿射
# ---------------------------------------------------------------------------

def marker_corners(marker_size: Tuple[int, int]) -> np.ndarray:
    """标记图四角像素中心，顺序为 左上、右上、右下、左下"""
    w, h = marker_size
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def _placement_translation(rng: np.random.Generator, linear: AffineTransform,
                           marker_size: Tuple[int, int], canvas_size: Tuple[int, int],
                           jitter: float) -> Optional[Point2]:
    """在保证包围盒位于画布内的前提下采样平移，无法放下时返回 None"""
    corners = linear.map_points(marker_corners(marker_size))
    low = corners.min(axis=0)
    high = corners.max(axis=0)
    limit = np.array([canvas_size[0] - 1.0, canvas_size[1] - 1.0])
    slack = limit - (high - low)
    if np.any(slack < 0):
        return None
    center = (-low + (limit - high)) / 2.0
    offset = rng.uniform(-slack / 2.0, slack / 2.0) * jitter
    return Point2(float(center[0] + offset[0]), float(center[1] + offset[1]))


def sample_affine(rng: np.random.Generator, config: SamplerConfig,
                  marker_size: Tuple[int, int]) -> AffineTransform:
    """
    采样仿射变换：旋转、剪切、缩放取均匀分布，再采样保证落在画布内的平移

    Args:
        rng: 随机数生成器
        config: 采样配置
        marker_size: 标记图尺寸 (宽, 高)

    Returns:
        AffineTransform对象
    """
    for attempt in range(config.affine_max_retries):
        theta = _uniform(rng, config.rotation_range)
        phi = _uniform(rng, config.shear_range)
        scale = _uniform(rng, config.scale_range)
        if math.cos(phi) <= 1e-9:
            continue
        linear = AffineTransform(theta, phi, scale, Point2(0.0, 0.0))
        translation = _placement_translation(rng, linear, marker_size, config.canvas_size,
                                             config.placement_jitter)
        if translation is not None:
            if attempt:
                logger.debug(f"仿射放置在第 {attempt + 1} 次尝试时成功")
            return AffineTransform(theta, phi, scale, translation)
    raise PlacementError(f"标记 {marker_size} 在 {config.affine_max_retries} 次尝试后仍无法放入画布 "
                         f"{config.canvas_size}")


# ---------------------------------------------------------------------------
# 单应
# ---------------------------------------------------------------------------

def quad_is_acceptable(quad: np.ndarray, reference_winding: float,
                       min_angle_deg: float = 20.0, max_angle_deg: float = 160.0) -> bool:
    """
    检查四边形是否凸、绕向与参考一致，并且每个内角位于给定区间

    Args:
        quad: (4, 2) 顶点，按顺序排列
        reference_winding: 参考绕向（叉积符号）
    """
    crosses = []
    for i in range(4):
        a, b, c = quad[i - 1], quad[i], quad[(i + 1) % 4]
        e1 = b - a
        e2 = c - b
        crosses.append(e1[0] * e2[1] - e1[1] * e2[0])
        v1 = a - b
        v2 = c - b
        n1 = math.hypot(v1[0], v1[1])
        n2 = math.hypot(v2[0], v2[1])
        if n1 == 0 or n2 == 0:
            return False
        cos_angle = max(-1.0, min(1.0, float(v1 @ v2) / (n1 * n2)))
        angle = math.degrees(math.acos(cos_angle))
        if not min_angle_deg <= angle <= max_angle_deg:
            return False
    signs = np.sign(crosses)
    return bool(np.all(signs == np.sign(reference_winding)) and reference_winding != 0)


def _winding(quad: np.ndarray) -> float:
    e1 = quad[1] - quad[0]
    e2 = quad[2] - quad[1]
    return float(e1[0] * e2[1] - e1[1] * e2[0])


def sample_homography(rng: np.random.Generator, marker_size: Tuple[int, int],
                      canvas_size: Tuple[int, int], max_draws: int = 1000,
                      min_angle_deg: float = 20.0, max_angle_deg: float = 160.0,
                      max_condition: float = 1e10,
                      draw_corners: Optional[Callable[[np.random.Generator], np.ndarray]] = None
                      ) -> Homography:
    """
    采样单应：在画布内均匀采样四个目标角点，拒绝非凸、绕向不一致或内角越界的四边形

    Args:
        rng: 随机数生成器
        marker_size: 标记图尺寸
        canvas_size: 画布尺寸
        max_draws: 最多采样次数
        draw_corners: 可选的角点生成函数（默认在画布内均匀采样）

    Returns:
        Homography对象
    """
    if min(marker_size) <= 1 or min(canvas_size) <= 1:
        raise DataError(f"尺寸必须大于1: 标记 {marker_size}, 画布 {canvas_size}")
    src = marker_corners(marker_size)
    winding = _winding(src)
    high = np.array([canvas_size[0] - 1.0, canvas_size[1] - 1.0])
    for draw in range(max_draws):
        if draw_corners is not None:
            dst = np.asarray(draw_corners(rng), dtype=np.float64).reshape(4, 2)
        else:
            dst = rng.uniform(0.0, high, size=(4, 2))
        if not quad_is_acceptable(dst, winding, min_angle_deg, max_angle_deg):
            continue
        try:
            return homography_from_four_points(src, dst, max_condition)
        except DataError as e:
            logger.debug(f"单应求解失败，重新采样: {e}")
    raise SamplingError(f"单应采样在 {max_draws} 次尝试后仍未得到合格的四边形")


# ---------------------------------------------------------------------------
# TPS
# ---------------------------------------------------------------------------

def _project_side_conditions(coefficients: np.ndarray) -> np.ndarray:
    """把核权重投影到 Σw = 0、Σw·c = 0 的子空间，消除远场的非仿射增长"""
    p = np.hstack([np.ones((len(TPS_CONTROL_POINTS), 1)), TPS_CONTROL_POINTS])
    projector = np.eye(len(p)) - p @ np.linalg.solve(p.T @ p, p.T)
    return projector @ coefficients


def _fit_into_range(values: np.ndarray, bounds: Tuple[float, float]) -> np.ndarray:
    """整体等比缩小，使每个元素落在区间内"""
    low, high = bounds
    factor = 1.0
    pos = values[values > 0]
    neg = values[values < 0]
    if pos.size:
        factor = min(factor, high / pos.max()) if high > 0 else 0.0
    if neg.size:
        factor = min(factor, low / neg.min()) if low < 0 else 0.0
    return values * factor


def tps_folds(tps: ThinPlateSpline, grid: int = 17) -> bool:
    """在 grid×grid 测试网格上检查雅可比行列式是否有非正值"""
    axis = np.linspace(-1.0, 1.0, grid)
    xs, ys = np.meshgrid(axis, axis)
    jac = tps.jacobian(np.stack([xs.ravel(), ys.ravel()], axis=1))
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    return bool(np.any(det <= 0))


def sample_tps(rng: np.random.Generator, config: SamplerConfig) -> ThinPlateSpline:
    """
    采样TPS：从恒等映射出发，对18个参数分别加上区间内的均匀扰动，出现折叠时重新采样
    tps_side_conditions 为真时，核权重再投影到薄板样条的边界条件上（超出区间时整体缩小）

    Args:
        rng: 随机数生成器
        config: 采样配置

    Returns:
        ThinPlateSpline对象
    """
    identity = np.array(ThinPlateSpline.identity().params())
    low, high = config.tps_range
    for draw in range(config.tps_max_draws):
        params = identity + rng.uniform(low, high, size=18)
        if config.tps_side_conditions and low < 0 < high:
            coefficients = _project_side_conditions(params[6:].reshape(6, 2))
            params[6:] = _fit_into_range(coefficients, config.tps_range).reshape(-1)
        tps = ThinPlateSpline.from_params(params)
        if not tps_folds(tps, config.tps_fold_grid):
            if draw:
                logger.debug(f"TPS在第 {draw + 1} 次采样时通过折叠检查")
            return tps
    raise SamplingError(f"TPS采样在 {config.tps_max_draws} 次尝试后仍然折叠")


def sample_transform(rng: np.random.Generator, config: SamplerConfig,
                     marker_size: Tuple[int, int]) -> GeometricTransform:
    """按权重选择类型并采样一个完整的几何变换"""
    kind = sample_kind(rng, config)
    if kind == 'affine':
        model = sample_affine(rng, config, marker_size)
    elif kind == 'homography':
        model = sample_homography(rng, marker_size, config.canvas_size, config.homography_max_draws,
                                  config.homography_min_angle_deg, config.homography_max_angle_deg,
                                  config.max_condition_number)
    else:
        model = sample_tps(rng, config)
    return GeometricTransform(model, marker_size, config.canvas_size)


# ---------------------------------------------------------------------------
# 合成
# ---------------------------------------------------------------------------

def synthesize_sample(marker: Image, background: Image, t: GeometricTransform,
                      sample_id: int = 0, seed: int = 0, marker_source: str = '',
                      background_source: str = '', max_cell_edge: float = 64.0) -> DatasetSample:
    """
    把变形后的标记直接覆盖到背景上，生成参考图与真值光流

    Args:
        marker: 标记图
        background: 画布尺寸的背景图
        t: 标记 -> 参考 的几何变换

    Returns:
        DatasetSample对象
    """
    if marker.size != t.marker_size:
        raise DataError(f"标记图尺寸 {marker.size} 与变换的标记尺寸 {t.marker_size} 不一致")
    if background.size != t.reference_size:
        raise DataError(f"背景尺寸 {background.size} 与画布尺寸 {t.reference_size} 不一致")

    raw = FlowField.from_transform(t, within_reference=False)
    if t.kind != 'tps' and raw.valid_count != raw.width * raw.height:
        raise DegenerateTransformError("变换在标记图内产生了非有限的坐标")
    flow = FlowField.from_transform(t, within_reference=True)
    if flow.valid_count == 0:
        raise DegenerateTransformError("标记完全落在画布之外")

    if background.channels == 3:
        marker = marker.to_rgb()
    elif marker.channels == 3:
        background = background.to_rgb()
    warped, region = warp_by_flow(marker, flow, t.reference_size, max_cell_edge)
    reference = composite(background, warped, region)
    return DatasetSample(sample_id=sample_id, seed=seed, transform=t, marker=marker,
                         reference=reference, flow=flow, region=region,
                         marker_source=marker_source, background_source=background_source)


def fit_marker(marker: Image, config: SamplerConfig) -> Image:
    """按配置调整标记尺寸；未指定尺寸时，超过画布一半的标记等比缩小"""
    if config.marker_size:
        return marker.resized(*config.marker_size)
    cw, ch = config.canvas_size
    factor = min(1.0, (cw / 2.0) / marker.width, (ch / 2.0) / marker.height)
    if factor >= 1.0:
        return marker
    return marker.resized(max(2, int(round(marker.width * factor))),
                          max(2, int(round(marker.height * factor))))


def sample_directory(root: str, sample_id: int) -> str:
    return os.path.join(root, 'samples', f"{sample_id:06d}")


def _relative_files(sample_id: int) -> Dict[str, str]:
    base = f"samples/{sample_id:06d}"
    return {name.split('.')[0]: f"{base}/{name}" for name in SAMPLE_FILES}


def write_sample(root: str, sample: DatasetSample) -> Dict[str, Any]:
    """
    写出一个样本的全部文件

    Returns:
        清单中的样本记录
    """
    directory = ensure_dir_exists(sample_directory(root, sample.sample_id))
    transform_dict = sample.transform.to_dict()
    save_png(os.path.join(directory, 'marker.png'), sample.marker)
    save_png(os.path.join(directory, 'reference.png'), sample.reference)
    atomic_write_bytes(os.path.join(directory, 'flow.flo'), encode_flo(sample.flow))
    atomic_write_bytes(os.path.join(directory, 'mask.png'), encode_mask_png(sample.region))
    atomic_write_bytes(os.path.join(directory, 'transform.json'),
                       dumps_json(transform_dict).encode('utf-8'))
    return {
        'id': sample.sample_id,
        'seed': sample.seed,
        'kind': sample.kind,
        'marker_source': sample.marker_source,
        'background_source': sample.background_source,
        'files': _relative_files(sample.sample_id),
        'transform': transform_dict,
        'valid_pixels': sample.flow.valid_count,
        'region_pixels': sample.region.count,
    }


def build_sample(index: int, config: SamplerConfig, markers: Sequence[str],
                 backgrounds: Sequence[str], cache: ImageCache) -> DatasetSample:
    """
    用样本自身的种子生成一个样本，失败时在同一随机流上重抽（有次数上限）

    Args:
        index: 样本序号
        config: 采样配置
        markers: 标记图路径列表
        backgrounds: 背景图路径列表
        cache: 图片缓存

    Returns:
        DatasetSample对象
    """
    seed = derive_sample_seed(config.seed, index)
    rng = np.random.default_rng(seed)
    last_error: Optional[Exception] = None
    for attempt in range(config.sample_max_retries):
        marker_path = markers[int(rng.integers(len(markers)))]
        background_path = backgrounds[int(rng.integers(len(backgrounds)))]
        marker = fit_marker(cache.load(marker_path), config)
        background = cache.load(background_path).resized(*config.canvas_size)
        try:
            t = sample_transform(rng, config, marker.size)
            return synthesize_sample(marker, background, t, sample_id=index, seed=seed,
                                     marker_source=marker_path, background_source=background_path,
                                     max_cell_edge=config.warp_max_cell_edge)
        except DataError as e:
            last_error = e
            logger.warning(f"样本 {index} 第 {attempt + 1} 次生成失败，重新抽取: {e}")
    raise SamplingError(f"样本 {index} 在 {config.sample_max_retries} 次尝试后仍生成失败: {last_error}")


def generate_dataset(config: SamplerConfig, marker_list: Sequence[str], background_list: Sequence[str],
                     output_root: str, workers: int = 1, cache_size: int = 64,
                     monitor: Optional[RunMonitor] = None) -> DatasetManifest:
    """
    生成数据集。样本分批并行生成并立即写盘，清单按样本序号排序后写出，
    因此输出与 workers 数量无关

    Args:
        config: 采样配置
        marker_list: 标记图路径
        background_list: 背景图路径
        output_root: 输出目录
        workers: 线程数

    Returns:
        DatasetManifest对象
    """
    if not marker_list:
        raise DataError("标记图列表为空")
    if not background_list:
        raise DataError("背景图列表为空")
    ensure_dir_exists(output_root)
    cache = ImageCache(load_image, cache_size)
    records: List[Dict[str, Any]] = []

    def produce(index: int) -> Dict[str, Any]:
        sample = build_sample(index, config, marker_list, background_list, cache)
        record = write_sample(output_root, sample)
        if monitor:
            monitor.item_done()
        return record

    logger.info(f"开始生成数据集 {config.dataset_name}: {config.sample_count} 个样本，{workers} 个线程")
    batch = max(1, workers * _BATCH_FACTOR)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        for start in range(0, config.sample_count, batch):
            indices = range(start, min(start + batch, config.sample_count))
            records.extend(executor.map(produce, indices))
            if start and start % (batch * 25) == 0:
                logger.info(f"已生成 {len(records)}/{config.sample_count} 个样本")

    records.sort(key=lambda r: r['id'])
    manifest = DatasetManifest(name=config.dataset_name, sample_count=config.sample_count,
                               records=records, config=config.to_dict())
    manifest.save(output_root)
    logger.info(f"数据集生成完成: {output_root}，缓存统计 {cache.get_stats()}")
    return manifest
