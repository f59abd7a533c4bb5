# markerforge/dvl_standin.py
"""
DVL 风格基准的合成替代数据
真实的形变 / 视角 / 光照拍摄数据无法重新生成，这里按同样的难度分级合成：
- 形变 1–5：小幅内凹、大幅内凹、小幅外凸、大幅外凸、波浪形（TPS）
- 视角 1–4：标记平面绕面内轴旋转 15°/30°/45°/60° 后透视投影（单应）
- 光照 1–10：1 正常光照，2 过曝，3–10 逐级变暗；每条记录附带同一位姿下的正常光照孪生图
"""
import os
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Any, Optional, Tuple

import numpy as np
from scipy import ndimage

from .benchmark import BenchmarkEntry, LEVEL_RANGES, write_benchmark_manifest
from .errors import ConfigError, DataError
from .flow_io import encode_flo
from .flyingmarkers import derive_sample_seed, synthesize_sample, tps_folds
from .geometry import GeometricTransform, ThinPlateSpline, homography_from_four_points
from .imaging import Image, load_image, save_png
from .monitoring import RunMonitor
from .utils import atomic_write_bytes, ensure_dir_exists, list_image_files

logger = logging.getLogger(__name__)

STANDIN_SUBSETS = ('deformation', 'viewpoint', 'lighting')
VIEWPOINT_ANGLES_DEG = {1: 15.0, 2: 30.0, 3: 45.0, 4: 60.0}
# (形状, 幅度)，幅度为控制点核权重
DEFORMATION_PATTERNS = {
    1: ('concave', 0.02),
    2: ('concave', 0.04),
    3: ('convex', 0.02),
    4: ('convex', 0.04),
    5: ('wave', 0.02),
}
_BEND = np.array([-0.5, 1.0, -0.5, -0.5, 1.0, -0.5])
_WAVE = np.array([1.0, -2.0, 1.0, -1.0, 2.0, -1.0])
_FOLD_SHRINK = 0.8
_MAX_SHRINK_STEPS = 20


@dataclass(frozen=True)
class StandinConfig:
    """替代数据的布局"""
    markers: int = 10
    images_per_marker: int = 10
    marker_size: Tuple[int, int] = (160, 120)
    canvas_size: Tuple[int, int] = (320, 240)
    seed: int = 0
    warp_max_cell_edge: float = 64.0

    def __post_init__(self):
        if self.markers < 1 or self.images_per_marker < 1:
            raise ConfigError("标记数量和每个标记的图像数量必须至少为1")
        mw, mh = self.marker_size
        cw, ch = self.canvas_size
        if min(mw, mh) < 8 or mw > cw or mh > ch:
            raise ConfigError(f"标记尺寸 {self.marker_size} 必须至少为8且不超过画布 {self.canvas_size}")

    @classmethod
    def from_settings(cls, settings: Dict[str, Any]) -> 'StandinConfig':
        return cls(markers=int(settings['standin_markers']),
                   images_per_marker=int(settings['standin_images_per_marker']),
                   marker_size=tuple(int(v) for v in settings['standin_marker_size']),
                   canvas_size=tuple(int(v) for v in settings['standin_canvas_size']),
                   seed=int(settings['seed']),
                   warp_max_cell_edge=float(settings['warp_max_cell_edge']))

    @property
    def record_count(self) -> int:
        return self.markers * self.images_per_marker * len(STANDIN_SUBSETS)


def procedural_texture(rng: np.random.Generator, width: int, height: int, channels: int = 3) -> Image:
    """平滑噪声叠加随机方向条纹的纹理图"""
    noise = ndimage.gaussian_filter(rng.normal(size=(height, width, channels)), sigma=(2.0, 2.0, 0.0))
    noise = (noise - noise.min()) / max(noise.max() - noise.min(), 1e-12)
    angle = rng.uniform(0.0, math.pi)
    period = rng.uniform(8.0, 24.0)
    ys, xs = np.mgrid[0:height, 0:width]
    stripes = 0.5 + 0.5 * np.sin(2.0 * math.pi * (xs * math.cos(angle) + ys * math.sin(angle)) / period)
    data = 0.6 * noise + 0.4 * stripes[..., None] * rng.uniform(0.5, 1.0, size=channels)
    return Image(np.clip(data, 0.0, 1.0))


def cyclic_level(subset: str, index: int) -> int:
    """按序号循环分配难度等级，保证每个等级都出现"""
    low, high = LEVEL_RANGES[subset]
    return low + index % (high - low + 1)


# ---------------------------------------------------------------------------
# 各子集的变换
# ---------------------------------------------------------------------------

def _placement_affine(rng: np.random.Generator, config: StandinConfig) -> np.ndarray:
    """标记在画布中的基础位置（归一化坐标），中心附近小幅抖动"""
    mw, mh = config.marker_size
    cw, ch = config.canvas_size
    sx = (mw - 1.0) / (cw - 1.0)
    sy = (mh - 1.0) / (ch - 1.0)
    tx = rng.uniform(-0.5, 0.5) * (1.0 - sx) * 0.5
    ty = rng.uniform(-0.5, 0.5) * (1.0 - sy) * 0.5
    return np.array([[sx, 0.0, tx], [0.0, sy, ty]])


def deformation_tps(rng: np.random.Generator, level: int, config: StandinConfig) -> ThinPlateSpline:
    """
    形变子集的TPS：核权重只作用在 y 方向，图案本身满足薄板样条边界条件

    Args:
        rng: 随机数生成器
        level: 难度等级 1–5
        config: 布局配置

    Returns:
        无折叠的ThinPlateSpline
    """
    shape, amplitude = DEFORMATION_PATTERNS[level]
    pattern = {'concave': _BEND, 'convex': -_BEND, 'wave': _WAVE}[shape]
    affine = _placement_affine(rng, config)
    amplitude *= rng.uniform(0.9, 1.1)
    for _ in range(_MAX_SHRINK_STEPS):
        coefficients = np.zeros((6, 2))
        coefficients[:, 1] = pattern * amplitude
        tps = ThinPlateSpline(affine, coefficients)
        if not tps_folds(tps):
            return tps
        amplitude *= _FOLD_SHRINK
    logger.warning(f"形变等级 {level} 的图案多次缩小后仍折叠，退化为纯仿射")
    return ThinPlateSpline(affine, np.zeros((6, 2)))


def out_of_plane_corners(marker_size: Tuple[int, int], canvas_size: Tuple[int, int],
                         angle_deg: float, axis_angle: float, offset: Tuple[float, float] = (0.0, 0.0)
                         ) -> np.ndarray:
    """
    标记平面绕过中心、方向为 axis_angle 的面内轴旋转后，用针孔模型投影四个角点

    Args:
        marker_size: 标记尺寸
        canvas_size: 画布尺寸
        angle_deg: 旋转角（度）
        axis_angle: 旋转轴方向（弧度）

    Returns:
        (4, 2) 参考图中的角点
    """
    mw, mh = marker_size
    cw, ch = canvas_size
    corners = np.array([[0.0, 0.0], [mw - 1.0, 0.0], [mw - 1.0, mh - 1.0], [0.0, mh - 1.0]])
    plane = np.hstack([corners - [(mw - 1.0) / 2.0, (mh - 1.0) / 2.0], np.zeros((4, 1))])

    axis = np.array([math.cos(axis_angle), math.sin(axis_angle), 0.0])
    theta = math.radians(angle_deg)
    k = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    rotation = np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)

    distance = 1.5 * max(mw, mh)
    cam = plane @ rotation.T + [0.0, 0.0, distance]
    projected = distance * cam[:, :2] / cam[:, 2:3]
    return projected + [(cw - 1.0) / 2.0 + offset[0], (ch - 1.0) / 2.0 + offset[1]]


def viewpoint_transform(rng: np.random.Generator, level: int, config: StandinConfig) -> GeometricTransform:
    """视角子集：等级对应的平面外旋转角，旋转轴方向随机"""
    mw, mh = config.marker_size
    cw, ch = config.canvas_size
    offset = (rng.uniform(-0.1, 0.1) * (cw - mw), rng.uniform(-0.1, 0.1) * (ch - mh))
    dst = out_of_plane_corners(config.marker_size, config.canvas_size, VIEWPOINT_ANGLES_DEG[level],
                               rng.uniform(0.0, math.pi), offset)
    src = np.array([[0.0, 0.0], [mw - 1.0, 0.0], [mw - 1.0, mh - 1.0], [0.0, mh - 1.0]])
    return GeometricTransform(homography_from_four_points(src, dst), config.marker_size, config.canvas_size)


def lighting_pose(rng: np.random.Generator, config: StandinConfig) -> GeometricTransform:
    """光照子集的位姿：轻微的视角变化，难度只来自曝光"""
    mw, mh = config.marker_size
    src = np.array([[0.0, 0.0], [mw - 1.0, 0.0], [mw - 1.0, mh - 1.0], [0.0, mh - 1.0]])
    dst = out_of_plane_corners(config.marker_size, config.canvas_size, rng.uniform(0.0, 10.0),
                               rng.uniform(0.0, math.pi))
    return GeometricTransform(homography_from_four_points(src, dst), config.marker_size, config.canvas_size)


def exposure_curve(image: Image, level: int) -> Image:
    """
    曝光曲线：等级1不变，等级2过曝（增益后截断），等级3–10逐级变暗并压低中间调

    Args:
        image: 正常光照图像
        level: 光照难度等级

    Returns:
        新图像
    """
    if level == 1:
        return image
    data = image.data
    if level == 2:
        out = data * 1.8 + 0.1
    else:
        gain = 0.8 ** (level - 2)
        gamma = 1.0 + 0.15 * (level - 2)
        out = gain * np.power(data, gamma)
    return Image(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# 生成
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Job:
    index: int
    subset: str
    marker_index: int
    image_index: int
    level: int

    @property
    def sample_id(self) -> str:
        return f"{self.subset}-{self.marker_index:02d}-{self.image_index:02d}"


def plan_jobs(config: StandinConfig) -> List[_Job]:
    """按 子集 × 标记 × 图像 排列全部记录"""
    jobs = []
    for subset in STANDIN_SUBSETS:
        for m in range(config.markers):
            for i in range(config.images_per_marker):
                n = m * config.images_per_marker + i
                jobs.append(_Job(len(jobs), subset, m, i, cyclic_level(subset, n)))
    return jobs


def _load_sources(directory: Optional[str], count: int, size: Tuple[int, int], seed: int,
                  label: str) -> List[Image]:
    if directory:
        paths = list_image_files(directory)
        if not paths:
            raise DataError(f"{label}目录中没有图片: {directory}")
        return [load_image(paths[i % len(paths)]).resized(*size).to_rgb() for i in range(count)]
    rng = np.random.default_rng(seed)
    # 与写出的8位PNG保持一致
    return [Image.from_uint8(procedural_texture(rng, size[0], size[1]).to_uint8()) for _ in range(count)]


def generate_standin(config: StandinConfig, output_root: str, marker_dir: Optional[str] = None,
                     background_dir: Optional[str] = None, workers: int = 1,
                     monitor: Optional[RunMonitor] = None) -> List[BenchmarkEntry]:
    """
    生成替代基准数据并写出基准清单

    Args:
        config: 布局配置
        output_root: 输出目录
        marker_dir: 标记图目录，为空时使用程序纹理
        background_dir: 背景图目录，为空时使用程序纹理
        workers: 线程数

    Returns:
        按 id 排序的BenchmarkEntry列表
    """
    ensure_dir_exists(output_root)
    markers = _load_sources(marker_dir, config.markers, config.marker_size,
                            derive_sample_seed(config.seed, -1), '标记')
    backgrounds = _load_sources(background_dir, config.images_per_marker, config.canvas_size,
                                derive_sample_seed(config.seed, -2), '背景')
    marker_paths = []
    for m, marker in enumerate(markers):
        path = os.path.join(ensure_dir_exists(os.path.join(output_root, 'markers')), f"marker_{m:02d}.png")
        save_png(path, marker)
        marker_paths.append(path)
    for subset in STANDIN_SUBSETS:
        ensure_dir_exists(os.path.join(output_root, subset))

    def produce(job: _Job) -> BenchmarkEntry:
        rng = np.random.default_rng(derive_sample_seed(config.seed, job.index))
        if job.subset == 'deformation':
            t = GeometricTransform(deformation_tps(rng, job.level, config), config.marker_size,
                                   config.canvas_size)
        elif job.subset == 'viewpoint':
            t = viewpoint_transform(rng, job.level, config)
        else:
            t = lighting_pose(rng, config)
        sample = synthesize_sample(markers[job.marker_index], backgrounds[job.image_index], t,
                                   max_cell_edge=config.warp_max_cell_edge)
        base = os.path.join(output_root, job.subset, job.sample_id)
        gt_path = base + '.flo'
        atomic_write_bytes(gt_path, encode_flo(sample.flow))
        twin_path = None
        reference = sample.reference
        if job.subset == 'lighting':
            twin_path = base + '_twin.png'
            save_png(twin_path, sample.reference)
            reference = exposure_curve(sample.reference, job.level)
        reference_path = base + '.png'
        save_png(reference_path, reference)
        if monitor:
            monitor.item_done()
        return BenchmarkEntry(job.sample_id, job.subset, job.level, marker_paths[job.marker_index],
                              reference_path, twin_path, gt_path)

    jobs = plan_jobs(config)
    logger.info(f"开始生成替代基准: {config.record_count} 条记录，{workers} 个线程")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        entries = sorted(executor.map(produce, jobs), key=lambda e: e.sample_id)
    write_benchmark_manifest(os.path.join(output_root, 'manifest.json'), entries)
    logger.info(f"替代基准生成完成: {output_root}")
    return entries
