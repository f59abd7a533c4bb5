# markerforge/monitoring.py
"""
运行监控
记录各阶段耗时、处理数量和进程内存，用于命令结束时的汇总行
指标只用于日志，不写入数据集或报告
"""
import time
import threading
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, List, Any

import psutil

logger = logging.getLogger(__name__)


@dataclass
class MetricPoint:
    """监控指标数据点"""
    timestamp: float
    value: float


class MetricCollector:
    """指标收集器"""

    def __init__(self):
        self.metrics: Dict[str, List[MetricPoint]] = {}
        self.lock = threading.RLock()

    def record(self, metric_name: str, value: float) -> None:
        """记录指标值"""
        with self.lock:
            self.metrics.setdefault(metric_name, []).append(
                MetricPoint(timestamp=time.time(), value=value)
            )

    def get_total(self, metric_name: str) -> float:
        """获取指标累计值"""
        with self.lock:
            return sum(p.value for p in self.metrics.get(metric_name, []))

    def get_count(self, metric_name: str) -> int:
        with self.lock:
            return len(self.metrics.get(metric_name, []))


class RunMonitor:
    """单次命令运行的监控器"""

    def __init__(self, name: str):
        self.name = name
        self.collector = MetricCollector()
        self._process = psutil.Process()
        self._start = time.perf_counter()
        self._peak_rss = 0
        self._phases: List[str] = []
        self._sample_memory()

    def _sample_memory(self) -> None:
        try:
            rss = self._process.memory_info().rss
        except psutil.Error as e:
            logger.debug(f"读取进程内存失败: {e}")
            return
        self._peak_rss = max(self._peak_rss, rss)

    @contextmanager
    def phase(self, phase_name: str):
        """计时一个阶段"""
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            if phase_name not in self._phases:
                self._phases.append(phase_name)
            self.collector.record(f'phase.{phase_name}', elapsed)
            self._sample_memory()
            logger.debug(f"[{self.name}] 阶段 {phase_name} 用时 {elapsed:.3f}s")

    def item_done(self, success: bool = True) -> None:
        """记录一个样本处理完成"""
        self.collector.record('items.processed', 1)
        if not success:
            self.collector.record('items.failed', 1)
        if self.collector.get_count('items.processed') % 50 == 0:
            self._sample_memory()

    def summary(self) -> Dict[str, Any]:
        """获取运行汇总"""
        self._sample_memory()
        elapsed = time.perf_counter() - self._start
        processed = self.collector.get_count('items.processed')
        return {
            'name': self.name,
            'processed': processed,
            'failed': self.collector.get_count('items.failed'),
            'elapsed_seconds': round(elapsed, 3),
            'items_per_second': round(processed / elapsed, 2) if elapsed > 0 else 0.0,
            'peak_rss_mb': round(self._peak_rss / (1024 * 1024), 1),
            # 同名阶段多次进入时累计
            'phases': {p: round(self.collector.get_total(f'phase.{p}'), 3) for p in self._phases},
        }

    def summary_line(self) -> str:
        """一行文字形式的汇总"""
        s = self.summary()
        phases = ''.join(f"，{name} {seconds:.2f}s" for name, seconds in s['phases'].items())
        return (f"{s['name']}: 处理 {s['processed']} 个，失败 {s['failed']} 个，"
                f"用时 {s['elapsed_seconds']:.2f}s（{s['items_per_second']:.2f} 个/秒），"
                f"峰值内存 {s['peak_rss_mb']:.1f} MB" + phases)
