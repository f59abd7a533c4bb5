# markerforge/benchmark.py
"""
基准测试
- 合成数据：EPE 与 PCK-δ
- DVL 风格数据：把标记按预测光流变形后与参考图（光照子集用正常光照的孪生图）比较 SSIM/PSNR
- 按子集与难度等级汇总，失败样本不参与均值/中位数，只计入失败率
"""
import os
import math
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Any, Optional, Sequence, Tuple, Union

import numpy as np
from lxml import etree

from .config_utils import VERSION
from .errors import DataError, EmptyRegionError
from .flow_io import read_flo
from .flyingmarkers import DatasetManifest, MANIFEST_NAME
from .image_cache import ImageCache
from .imaging import FlowField, Image, psnr_value, ssim_value, warp_by_flow, load_image
from .matcher import Estimator, EstimatorContext, MatchOutcome, get_estimator
from .monitoring import RunMonitor
from .utils import read_json, write_json, atomic_write_bytes

logger = logging.getLogger(__name__)

SUBSETS = ('deformation', 'viewpoint', 'lighting', 'synthetic')
LEVEL_RANGES = {
    'deformation': (1, 5),
    'viewpoint': (1, 4),
    'lighting': (1, 10),
    'synthetic': (1, 3),
}
# 合成数据的难度等级按变换类型划分
SYNTHETIC_LEVELS = {'affine': 1, 'homography': 2, 'tps': 3}

OUTCOME_SCORED = 'scored'
OUTCOME_FAILED = 'failed'

DEFAULT_METRICS = {
    'ssim_window': 11,
    'ssim_sigma': 1.5,
    'ssim_k1': 0.01,
    'ssim_k2': 0.03,
    'ssim_dynamic_range': 1.0,
    'psnr_cap': 99.0,
    'pck_thresholds': [1.0, 3.0, 5.0],
    'warp_max_cell_edge': 64.0,
}


def delta_key(delta: float) -> str:
    """PCK 阈值在 JSON 中的键"""
    return f"{delta:g}"


# ---------------------------------------------------------------------------
# 样本
# ---------------------------------------------------------------------------

def _check_level(subset: str, level: int) -> None:
    if subset not in LEVEL_RANGES:
        raise DataError(f"未知的子集: {subset}，可选值: {list(SUBSETS)}")
    low, high = LEVEL_RANGES[subset]
    if not low <= level <= high:
        raise DataError(f"子集 {subset} 的难度等级必须在 {low}–{high} 之间，实际为 {level}")


@dataclass
class BenchmarkSample:
    """一个基准样本"""
    sample_id: str
    subset: str
    level: int
    marker: Image
    reference: Image
    twin: Optional[Image] = None
    gt_flow: Optional[FlowField] = None

    def __post_init__(self):
        _check_level(self.subset, self.level)
        if self.subset == 'lighting' and self.twin is None:
            raise DataError(f"光照样本 {self.sample_id} 缺少孪生图")
        if self.subset == 'synthetic' and self.gt_flow is None:
            raise DataError(f"合成样本 {self.sample_id} 缺少真值光流")
        if self.twin is not None and self.twin.size != self.reference.size:
            raise DataError(f"样本 {self.sample_id} 的孪生图与参考图尺寸不一致")
        if self.gt_flow is not None and self.gt_flow.size != self.marker.size:
            raise DataError(f"样本 {self.sample_id} 的真值光流与标记图尺寸不一致")


@dataclass(frozen=True)
class BenchmarkEntry:
    """清单中的一条记录（路径为绝对路径），评估时才读取图像"""
    sample_id: str
    subset: str
    level: int
    marker: str
    reference: str
    twin: Optional[str] = None
    gt_flow: Optional[str] = None

    def load(self, cache: Optional[ImageCache] = None) -> BenchmarkSample:
        load = cache.load if cache is not None else load_image
        return BenchmarkSample(
            sample_id=self.sample_id, subset=self.subset, level=self.level,
            marker=load(self.marker), reference=load_image(self.reference),
            twin=load_image(self.twin) if self.twin else None,
            gt_flow=read_flo(self.gt_flow) if self.gt_flow else None,
        )

    def to_dict(self, root: str) -> Dict[str, Any]:
        data = {'id': self.sample_id, 'subset': self.subset, 'level': self.level,
                'marker': os.path.relpath(self.marker, root).replace(os.sep, '/'),
                'reference': os.path.relpath(self.reference, root).replace(os.sep, '/')}
        if self.twin:
            data['twin'] = os.path.relpath(self.twin, root).replace(os.sep, '/')
        if self.gt_flow:
            data['gt_flow'] = os.path.relpath(self.gt_flow, root).replace(os.sep, '/')
        return data


def parse_benchmark_manifest(data: Any, root: str) -> List[BenchmarkEntry]:
    """
    解析基准清单 [{id, subset, level, marker, reference, twin?, gt_flow?}]

    Args:
        data: 已解析的JSON
        root: 相对路径的基准目录

    Returns:
        BenchmarkEntry列表
    """
    if not isinstance(data, list):
        raise DataError("基准清单必须是记录数组")
    entries = []
    seen = set()
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            raise DataError(f"基准清单第 {i} 条记录不是对象")
        missing = [k for k in ('id', 'subset', 'level', 'marker', 'reference') if k not in item]
        if missing:
            raise DataError(f"基准清单第 {i} 条记录缺少字段: {missing}")
        unknown = sorted(set(item) - {'id', 'subset', 'level', 'marker', 'reference', 'twin', 'gt_flow'})
        if unknown:
            raise DataError(f"基准清单第 {i} 条记录包含未知字段: {unknown}")
        sample_id = str(item['id'])
        if sample_id in seen:
            raise DataError(f"基准清单中样本 id 重复: {sample_id}")
        seen.add(sample_id)
        try:
            level = int(item['level'])
        except (TypeError, ValueError) as e:
            raise DataError(f"样本 {sample_id} 的难度等级无效: {item['level']!r}") from e
        subset = item['subset']
        _check_level(subset, level)
        if subset == 'lighting' and not item.get('twin'):
            raise DataError(f"光照样本 {sample_id} 缺少 twin 字段")
        if subset == 'synthetic' and not item.get('gt_flow'):
            raise DataError(f"合成样本 {sample_id} 缺少 gt_flow 字段")

        def resolve(key):
            value = item.get(key)
            return os.path.join(root, value) if value else None

        entries.append(BenchmarkEntry(sample_id, subset, level, resolve('marker'), resolve('reference'),
                                      resolve('twin'), resolve('gt_flow')))
    return entries


def samples_from_dataset(root: str) -> List[BenchmarkEntry]:
    """把 FlyingMarkers 数据集转换为合成子集的基准记录，难度等级由变换类型决定"""
    manifest = DatasetManifest.load(root)
    entries = []
    for record in manifest.records:
        files = record['files']
        entries.append(BenchmarkEntry(
            sample_id=f"{int(record['id']):06d}", subset='synthetic',
            level=SYNTHETIC_LEVELS[record['kind']],
            marker=os.path.join(root, files['marker']),
            reference=os.path.join(root, files['reference']),
            gt_flow=os.path.join(root, files['flow'])))
    return entries


def load_benchmark(path: str) -> List[BenchmarkEntry]:
    """
    读取基准清单或 FlyingMarkers 数据集（目录或 manifest.json）

    Args:
        path: 清单路径或数据集目录

    Returns:
        BenchmarkEntry列表
    """
    manifest_path = os.path.join(path, MANIFEST_NAME) if os.path.isdir(path) else path
    data = read_json(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    if isinstance(data, dict) and 'format' in data:
        return samples_from_dataset(root)
    return parse_benchmark_manifest(data, root)


def write_benchmark_manifest(path: str, entries: Sequence[BenchmarkEntry]) -> None:
    root = os.path.dirname(os.path.abspath(path))
    write_json(path, [e.to_dict(root) for e in entries])


# ---------------------------------------------------------------------------
# 指标
# ---------------------------------------------------------------------------

def _check_flow_pair(flow_pred: FlowField, gt: FlowField) -> None:
    if flow_pred.size != gt.size:
        raise DataError(f"预测光流尺寸 {flow_pred.size} 与真值 {gt.size} 不一致")


def epe(flow_pred: FlowField, gt: FlowField) -> Tuple[np.ndarray, float]:
    """
    端点误差 ‖f(x) − T(x)‖₂，在两者都有效的像素上计算

    Args:
        flow_pred: 预测光流
        gt: 真值光流

    Returns:
        (逐像素误差图（其余像素为 NaN）, 平均值)
    """
    _check_flow_pair(flow_pred, gt)
    both = flow_pred.valid & gt.valid
    if not both.any():
        raise EmptyRegionError("预测与真值没有共同的有效像素")
    diff = flow_pred.target - gt.target
    errors = np.sqrt(diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1])
    error_map = np.where(both, errors, np.nan)
    return error_map, math.fsum(errors[both].tolist()) / int(both.sum())


def pck(flow_pred: FlowField, gt: FlowField, delta: float) -> float:
    """
    EPE < δ 的像素比例；分母为真值有效的全部像素，预测无效的像素计为错误

    Args:
        flow_pred: 预测光流
        gt: 真值光流
        delta: 阈值（像素）

    Returns:
        [0, 1] 内的比例
    """
    _check_flow_pair(flow_pred, gt)
    total = gt.valid_count
    if total == 0:
        raise EmptyRegionError("真值光流没有有效像素")
    both = flow_pred.valid & gt.valid
    diff = flow_pred.target - gt.target
    errors = np.sqrt(diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1])
    correct = int(np.count_nonzero(both & (errors < delta)))
    return correct / total


@dataclass(frozen=True)
class AlignmentScore:
    ssim: float
    psnr: float
    valid_pixels: int


def alignment_eval(marker: Image, flow_pred: FlowField, reference: Image,
                   twin: Optional[Image] = None,
                   metrics: Optional[Dict[str, Any]] = None) -> AlignmentScore:
    """
    按预测光流把标记变形到参考画布，在覆盖区域内计算 SSIM 与 PSNR
    有孪生图时与孪生图比较（光照子集协议），否则与参考图比较

    Args:
        marker: 标记图
        flow_pred: 预测光流
        reference: 参考图
        twin: 正常光照的孪生图

    Returns:
        AlignmentScore对象
    """
    m = dict(DEFAULT_METRICS, **(metrics or {}))
    target = twin if twin is not None else reference
    if twin is not None and twin.size != reference.size:
        raise DataError("孪生图与参考图尺寸不一致")
    if target.channels == 3:
        marker = marker.to_rgb()
    elif marker.channels == 3:
        target = target.to_rgb()
    warped, region = warp_by_flow(marker, flow_pred, target.size, m['warp_max_cell_edge'])
    if region.count == 0:
        raise EmptyRegionError("变形后的标记没有覆盖任何参考像素")
    ssim = ssim_value(warped, target, region, m['ssim_window'], m['ssim_sigma'],
                      m['ssim_k1'], m['ssim_k2'], m['ssim_dynamic_range'])
    psnr = psnr_value(warped, target, region, m['psnr_cap'], m['ssim_dynamic_range'])
    return AlignmentScore(ssim, psnr, region.count)


# ---------------------------------------------------------------------------
# 评估记录与报告
# ---------------------------------------------------------------------------

@dataclass
class EvalRecord:
    """单个样本的评估结果"""
    sample_id: str
    subset: str
    level: int
    outcome: str
    reason: Optional[str] = None
    epe: Optional[float] = None
    pck: Dict[str, float] = field(default_factory=dict)
    ssim: Optional[float] = None
    psnr: Optional[float] = None
    valid_pixels: int = 0

    @property
    def scored(self) -> bool:
        return self.outcome == OUTCOME_SCORED

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.sample_id,
            'subset': self.subset,
            'level': self.level,
            'outcome': self.outcome,
            'reason': self.reason,
            'epe': self.epe,
            'pck': dict(self.pck),
            'ssim': self.ssim,
            'psnr': self.psnr,
            'valid_pixels': self.valid_pixels,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvalRecord':
        return cls(sample_id=str(data['id']), subset=data['subset'], level=int(data['level']),
                   outcome=data['outcome'], reason=data.get('reason'), epe=data.get('epe'),
                   pck=dict(data.get('pck') or {}), ssim=data.get('ssim'), psnr=data.get('psnr'),
                   valid_pixels=int(data.get('valid_pixels', 0)))


def _mean(values: List[float]) -> Optional[float]:
    return math.fsum(values) / len(values) if values else None


def lower_median(values: List[float]) -> Optional[float]:
    """偶数个时取较小的中位数"""
    if not values:
        return None
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


@dataclass
class SubsetSummary:
    """子集汇总，均值与中位数只在成功评估的样本上计算"""
    subset: str
    total: int
    scored: int
    failed: int
    failed_pct: float
    ssim_mean: Optional[float] = None
    ssim_median: Optional[float] = None
    psnr_mean: Optional[float] = None
    psnr_median: Optional[float] = None
    epe_mean: Optional[float] = None
    pck: Dict[str, Optional[float]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class LevelPoint:
    """难度曲线上的一个点"""
    subset: str
    level: int
    total: int
    scored: int
    ssim_mean: Optional[float] = None
    psnr_mean: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class BenchmarkReport:
    """基准报告"""
    estimator: str
    records: List[EvalRecord]
    subsets: Dict[str, SubsetSummary]
    levels: List[LevelPoint]
    pck_thresholds: List[float]
    version: str = VERSION

    def to_dict(self) -> Dict[str, Any]:
        return {
            'estimator': self.estimator,
            'pck_thresholds': list(self.pck_thresholds),
            'subsets': {k: v.to_dict() for k, v in self.subsets.items()},
            'levels': [p.to_dict() for p in self.levels],
            'records': [r.to_dict() for r in self.records],
            'version': self.version,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BenchmarkReport':
        try:
            return cls(estimator=data['estimator'],
                       records=[EvalRecord.from_dict(r) for r in data.get('records', [])],
                       subsets={k: SubsetSummary(**v) for k, v in data['subsets'].items()},
                       levels=[LevelPoint(**p) for p in data['levels']],
                       pck_thresholds=[float(d) for d in data['pck_thresholds']],
                       version=data.get('version', ''))
        except (KeyError, TypeError) as e:
            raise DataError(f"报告格式错误: {e}") from e

    @classmethod
    def load(cls, path: str) -> 'BenchmarkReport':
        return cls.from_dict(read_json(path))

    def save(self, path: str) -> None:
        write_json(path, self.to_dict())


def summarize(records: List[EvalRecord], estimator: str,
              pck_thresholds: Sequence[float]) -> BenchmarkReport:
    """
    汇总评估记录

    Args:
        records: 评估记录
        estimator: 估计器名称
        pck_thresholds: PCK 阈值

    Returns:
        BenchmarkReport对象
    """
    records = sorted(records, key=lambda r: r.sample_id)
    subsets: Dict[str, SubsetSummary] = {}
    levels: List[LevelPoint] = []
    for subset in SUBSETS:
        group = [r for r in records if r.subset == subset]
        if not group:
            continue
        scored = [r for r in group if r.scored]
        ssim = [r.ssim for r in scored if r.ssim is not None]
        psnr = [r.psnr for r in scored if r.psnr is not None]
        with_gt = [r for r in scored if r.pck]
        summary = SubsetSummary(
            subset=subset, total=len(group), scored=len(scored), failed=len(group) - len(scored),
            failed_pct=100.0 * (len(group) - len(scored)) / len(group),
            ssim_mean=_mean(ssim), ssim_median=lower_median(ssim),
            psnr_mean=_mean(psnr), psnr_median=lower_median(psnr),
            epe_mean=_mean([r.epe for r in scored if r.epe is not None]),
        )
        if subset == 'synthetic' or with_gt:
            summary.pck = {delta_key(d): _mean([r.pck[delta_key(d)] for r in with_gt])
                           for d in pck_thresholds}
        subsets[subset] = summary

        low, high = LEVEL_RANGES[subset]
        for level in range(low, high + 1):
            at_level = [r for r in group if r.level == level]
            ok = [r for r in at_level if r.scored]
            levels.append(LevelPoint(subset=subset, level=level, total=len(at_level), scored=len(ok),
                                     ssim_mean=_mean([r.ssim for r in ok if r.ssim is not None]),
                                     psnr_mean=_mean([r.psnr for r in ok if r.psnr is not None])))
    return BenchmarkReport(estimator=estimator, records=records, subsets=subsets, levels=levels,
                           pck_thresholds=list(pck_thresholds))


# ---------------------------------------------------------------------------
# 运行
# ---------------------------------------------------------------------------

def estimator_seed(seed: int, sample_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


def evaluate_sample(sample: BenchmarkSample, estimator: Estimator, ctx: EstimatorContext,
                    metrics: Dict[str, Any]) -> EvalRecord:
    """
    评估单个样本：运行估计器，有真值时计算 EPE/PCK，再计算对齐一致性

    Returns:
        EvalRecord对象
    """
    base = dict(sample_id=sample.sample_id, subset=sample.subset, level=sample.level)
    outcome: MatchOutcome = estimator(sample.marker, sample.reference, ctx)
    if outcome.failed:
        logger.debug(f"样本 {sample.sample_id} 估计失败: {outcome.reason}")
        return EvalRecord(outcome=OUTCOME_FAILED, reason=outcome.reason, **base)
    flow = outcome.flow
    if flow.size != sample.marker.size:
        raise DataError(f"样本 {sample.sample_id} 的预测光流尺寸 {flow.size} 与标记图 {sample.marker.size} 不一致")

    try:
        score = alignment_eval(sample.marker, flow, sample.reference, sample.twin, metrics)
    except EmptyRegionError as e:
        logger.debug(f"样本 {sample.sample_id} 有效区域为空: {e}")
        return EvalRecord(outcome=OUTCOME_FAILED, reason='empty region', **base)

    record = EvalRecord(outcome=OUTCOME_SCORED, ssim=score.ssim, psnr=score.psnr,
                        valid_pixels=score.valid_pixels, **base)
    if sample.gt_flow is not None and sample.gt_flow.valid_count:
        try:
            record.epe = epe(flow, sample.gt_flow)[1]
        except EmptyRegionError:
            record.epe = None
        record.pck = {delta_key(d): pck(flow, sample.gt_flow, d) for d in metrics['pck_thresholds']}
    return record


def run_benchmark(samples: Sequence[Union[BenchmarkSample, BenchmarkEntry]],
                  estimator: Union[str, Estimator], config: Optional[Dict[str, Any]] = None,
                  workers: int = 1, seed: int = 0, flow_dir: Optional[str] = None,
                  matcher_settings: Optional[Dict[str, Any]] = None, cache_size: int = 64,
                  monitor: Optional[RunMonitor] = None, estimator_name: Optional[str] = None
                  ) -> BenchmarkReport:
    """
    在全部样本上运行估计器并汇总

    Args:
        samples: 基准样本或清单记录
        estimator: 估计器名称或函数
        config: 指标设置（见 ConfigManager.get_metric_settings）
        workers: 线程数
        seed: 估计器随机种子
        flow_dir: flow-dir 估计器读取的目录

    Returns:
        BenchmarkReport对象
    """
    metrics = dict(DEFAULT_METRICS, **(config or {}))
    if isinstance(estimator, str):
        estimator_name = estimator_name or estimator
        estimator = get_estimator(estimator)
    estimator_name = estimator_name or getattr(estimator, '__name__', 'custom')
    cache = ImageCache(load_image, cache_size)

    def evaluate(item) -> EvalRecord:
        sample = item.load(cache) if isinstance(item, BenchmarkEntry) else item
        ctx = EstimatorContext(sample_id=sample.sample_id, gt_flow=sample.gt_flow, flow_dir=flow_dir,
                               seed=estimator_seed(seed, sample.sample_id),
                               settings=dict(matcher_settings or {}))
        record = evaluate_sample(sample, estimator, ctx, metrics)
        if monitor:
            monitor.item_done(record.scored)
        return record

    logger.info(f"开始基准测试: 估计器 {estimator_name}，{len(samples)} 个样本，{workers} 个线程")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        records = list(executor.map(evaluate, samples))
    report = summarize(records, estimator_name, metrics['pck_thresholds'])
    failed = sum(1 for r in records if not r.scored)
    logger.info(f"基准测试完成: {len(records)} 个样本，失败 {failed} 个")
    return report


# ---------------------------------------------------------------------------
# 文本表格
# ---------------------------------------------------------------------------

def _fmt(value: Optional[float], digits: int = 4) -> str:
    return '-' if value is None else f"{value:.{digits}f}"


def _align(rows: List[List[str]]) -> str:
    """首列左对齐，其余列右对齐"""
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for n, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append('  '.join(cells).rstrip())
        if n == 0:
            lines.append('  '.join('-' * w for w in widths))
    return '\n'.join(lines)


def format_table(reports: Sequence[BenchmarkReport]) -> str:
    """
    生成文本报告：子集汇总表、PCK表、难度等级表

    Args:
        reports: 一个或多个估计器的报告

    Returns:
        对齐的多段文本
    """
    sections = []
    rows = [['Method', 'Subset', 'N', 'Failed%', 'SSIM mean', 'SSIM median', 'PSNR mean', 'PSNR median']]
    for report in reports:
        for subset, s in report.subsets.items():
            rows.append([report.estimator, subset, str(s.total), f"{s.failed_pct:.1f}",
                         _fmt(s.ssim_mean), _fmt(s.ssim_median), _fmt(s.psnr_mean, 2), _fmt(s.psnr_median, 2)])
    sections.append(_align(rows))

    pck_reports = [r for r in reports if any(s.pck for s in r.subsets.values())]
    if pck_reports:
        thresholds = pck_reports[0].pck_thresholds
        rows = [['Method', 'Subset'] + [f"PCK-{delta_key(d)}" for d in thresholds] + ['EPE']]
        for report in pck_reports:
            for subset, s in report.subsets.items():
                if s.pck:
                    rows.append([report.estimator, subset]
                                + [_fmt(s.pck.get(delta_key(d)), 3) for d in thresholds]
                                + [_fmt(s.epe_mean, 3)])
        sections.append(_align(rows))

    rows = [['Method', 'Subset', 'Level', 'N', 'Scored', 'SSIM mean', 'PSNR mean']]
    for report in reports:
        for p in report.levels:
            rows.append([report.estimator, p.subset, str(p.level), str(p.total), str(p.scored),
                         _fmt(p.ssim_mean), _fmt(p.psnr_mean, 2)])
    sections.append(_align(rows))
    return '\n\n'.join(sections) + '\n'


# ---------------------------------------------------------------------------
# SVG 曲线
# ---------------------------------------------------------------------------

SVG_NS = 'http://www.w3.org/2000/svg'
_PALETTE = ['#1f77b4', '#d62728', '#2ca02c', '#ff7f0e', '#9467bd', '#8c564b', '#17becf']
_CHART_W, _CHART_H, _MARGIN = 480, 320, 50


def _svg(tag: str, parent=None, text: Optional[str] = None, **attrs):
    attrs = {k.replace('_', '-'): str(v) for k, v in attrs.items()}
    el = etree.Element(f"{{{SVG_NS}}}{tag}", attrs, nsmap={None: SVG_NS}) if parent is None \
        else etree.SubElement(parent, f"{{{SVG_NS}}}{tag}", attrs)
    if text is not None:
        el.text = text
    return el


def render_level_chart(reports: Sequence[BenchmarkReport], subset: str, metric: str) -> bytes:
    """
    绘制一个子集的难度等级曲线，每个估计器一条折线

    Args:
        reports: 估计器报告
        subset: 子集名
        metric: 'ssim' 或 'psnr'

    Returns:
        SVG 文件内容
    """
    low, high = LEVEL_RANGES[subset]
    key = f"{metric}_mean"
    series = []
    for report in reports:
        points = [(p.level, getattr(p, key)) for p in report.levels
                  if p.subset == subset and getattr(p, key) is not None]
        series.append((report.estimator, points))
    values = [v for _, pts in series for _, v in pts]
    if metric == 'ssim':
        y_min, y_max = min([0.0] + values), 1.0
    else:
        y_min, y_max = 0.0, max([10.0] + values)
    y_span = (y_max - y_min) or 1.0
    plot_w, plot_h = _CHART_W - 2 * _MARGIN, _CHART_H - 2 * _MARGIN

    def px(level):
        return _MARGIN + (plot_w * (level - low) / (high - low) if high > low else plot_w / 2)

    def py(value):
        return _MARGIN + plot_h * (1.0 - (value - y_min) / y_span)

    root = _svg('svg', width=_CHART_W, height=_CHART_H, viewBox=f"0 0 {_CHART_W} {_CHART_H}")
    _svg('rect', root, x=0, y=0, width=_CHART_W, height=_CHART_H, fill='white')
    _svg('text', root, f"{subset} - {metric.upper()}", x=_CHART_W / 2, y=24, text_anchor='middle',
         font_family='sans-serif', font_size=14)
    _svg('line', root, x1=_MARGIN, y1=_MARGIN + plot_h, x2=_MARGIN + plot_w, y2=_MARGIN + plot_h, stroke='black')
    _svg('line', root, x1=_MARGIN, y1=_MARGIN, x2=_MARGIN, y2=_MARGIN + plot_h, stroke='black')
    for level in range(low, high + 1):
        _svg('text', root, str(level), x=f"{px(level):.1f}", y=_MARGIN + plot_h + 16,
             text_anchor='middle', font_family='sans-serif', font_size=11)
    for i in range(5):
        value = y_min + y_span * i / 4
        _svg('text', root, f"{value:.2f}", x=_MARGIN - 6, y=f"{py(value) + 4:.1f}", text_anchor='end',
             font_family='sans-serif', font_size=10)

    for n, (name, points) in enumerate(series):
        color = _PALETTE[n % len(_PALETTE)]
        if points:
            coords = ' '.join(f"{px(l):.1f},{py(v):.1f}" for l, v in points)
            _svg('polyline', root, points=coords, fill='none', stroke=color, stroke_width=2)
            for l, v in points:
                _svg('circle', root, cx=f"{px(l):.1f}", cy=f"{py(v):.1f}", r=3, fill=color)
        _svg('text', root, name, x=_MARGIN + plot_w - 4, y=_MARGIN + 14 * (n + 1), text_anchor='end',
             fill=color, font_family='sans-serif', font_size=11)
    return etree.tostring(root, pretty_print=True, xml_declaration=True, encoding='utf-8')


def write_level_charts(reports: Sequence[BenchmarkReport], out_dir: str) -> List[str]:
    """为报告中出现的每个子集写出 SSIM 与 PSNR 曲线"""
    paths = []
    present = [s for s in SUBSETS if any(s in r.subsets for r in reports)]
    for subset in present:
        for metric in ('ssim', 'psnr'):
            path = os.path.join(out_dir, f"curves_{subset}_{metric}.svg")
            atomic_write_bytes(path, render_level_chart(reports, subset, metric))
            paths.append(path)
    return paths


def write_report(report_or_reports: Union[BenchmarkReport, Sequence[BenchmarkReport]], out_dir: str,
                 report_format: str = 'all', charts: bool = True) -> List[str]:
    """
    写出报告文件

    Args:
        report_or_reports: 单个报告或多个报告
        out_dir: 输出目录
        report_format: json / table / all

    Returns:
        写出的文件路径
    """
    reports = [report_or_reports] if isinstance(report_or_reports, BenchmarkReport) else list(report_or_reports)
    written = []
    if report_format in ('json', 'all'):
        for report in reports:
            path = os.path.join(out_dir, 'report.json' if len(reports) == 1 else f"report_{report.estimator}.json")
            report.save(path)
            written.append(path)
    if report_format in ('table', 'all'):
        path = os.path.join(out_dir, 'report.txt')
        atomic_write_bytes(path, format_table(reports).encode('utf-8'))
        written.append(path)
    if charts:
        written.extend(write_level_charts(reports, out_dir))
    return written
