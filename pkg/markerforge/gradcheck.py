# markerforge/gradcheck.py
"""
梯度校验模块
在随机实例上用中心差分验证 L_Syn 与 L_SED 的解析梯度
"""
import time
import logging
from typing import Dict, Any, Callable

import numpy as np

from .flyingmarkers import SamplerConfig, sample_tps
from .geometry import FundamentalMatrix, GeometricTransform
from .imaging import FlowField
from .losses import l_syn, l_sed, grad_l_syn, grad_l_sed

logger = logging.getLogger(__name__)

ABS_TOLERANCE = 1e-3
REL_TOLERANCE = 1e-4
KINK_DISTANCE = 1e-2


def random_rank2_fundamental(rng: np.random.Generator) -> FundamentalMatrix:
    """随机秩2基础矩阵：把最小奇异值置零后归一化"""
    u, s, vt = np.linalg.svd(rng.normal(size=(3, 3)))
    s[2] = 0.0
    return FundamentalMatrix.from_matrix(u @ np.diag(s) @ vt)


class GradientChecker:
    """梯度校验器"""

    def __init__(self, seed: int = 0, pixels_per_loss: int = 500, h: float = 1e-4,
                 marker_size=(32, 24), reference_size=(320, 240)):
        """
        Args:
            seed: 随机种子
            pixels_per_loss: 每个损失校验的像素数
            h: 中心差分步长
        """
        self.seed = seed
        self.pixels_per_loss = pixels_per_loss
        self.h = h
        self.marker_size = marker_size
        self.reference_size = reference_size
        self.logger = logger

    def _random_flow(self, rng: np.random.Generator) -> FlowField:
        w, h = self.marker_size
        rw, rh = self.reference_size
        target = rng.uniform(0.0, 1.0, size=(h, w, 2)) * np.array([rw - 1.0, rh - 1.0])
        valid = np.zeros(h * w, dtype=bool)
        valid[rng.permutation(h * w)[:min(self.pixels_per_loss, h * w)]] = True
        return FlowField(target, valid.reshape(h, w))

    def _finite_difference(self, flow: FlowField, per_pixel: Callable[[FlowField], np.ndarray]) -> np.ndarray:
        """逐像素损失只依赖本像素的对应点，可以对所有像素同时做中心差分"""
        fd = np.zeros(flow.target.shape)
        for axis in range(2):
            step = np.zeros(2)
            step[axis] = self.h
            plus = per_pixel(FlowField(flow.target + step, flow.valid))
            minus = per_pixel(FlowField(flow.target - step, flow.valid))
            fd[..., axis] = (plus - minus) / (2.0 * self.h)
        return fd

    def _compare(self, name: str, analytic: np.ndarray, numeric: np.ndarray,
                 checked_mask: np.ndarray, skipped: int) -> Dict[str, Any]:
        a = analytic[checked_mask]
        n = numeric[checked_mask]
        abs_err = np.abs(a - n)
        rel_err = abs_err / np.maximum(np.abs(n), 1.0)
        failures = int(np.count_nonzero((abs_err > ABS_TOLERANCE) | (rel_err > REL_TOLERANCE)))
        result = {
            'checked': int(checked_mask.sum()),
            'skipped_near_kink': skipped,
            'max_abs_error': float(abs_err.max()) if abs_err.size else 0.0,
            'max_rel_error': float(rel_err.max()) if rel_err.size else 0.0,
            'failures': failures,
            'passed': failures == 0 and bool(checked_mask.any()),
        }
        self.logger.info(f"{name} 梯度校验: 检查 {result['checked']} 个像素，"
                         f"最大绝对误差 {result['max_abs_error']:.2e}，失败 {failures} 个")
        return result

    def check_l_syn(self) -> Dict[str, Any]:
        """校验 L_Syn 梯度"""
        rng = np.random.default_rng(self.seed)
        config = SamplerConfig(canvas_size=self.reference_size, tps_max_draws=1000)
        t = GeometricTransform(sample_tps(rng, config), self.marker_size, self.reference_size)
        flow = self._random_flow(rng)
        analytic = grad_l_syn(flow, t).gradient
        numeric = self._finite_difference(flow, lambda fl: l_syn(fl, t).per_pixel)

        diff = flow.target - FlowField.from_transform(t, within_reference=False).target
        near_kink = np.any(np.abs(diff) < KINK_DISTANCE, axis=2) & flow.valid
        checked = flow.valid & ~near_kink
        return self._compare('L_Syn', analytic, numeric, checked, int(near_kink.sum()))

    def check_l_sed(self) -> Dict[str, Any]:
        """校验 L_SED 梯度"""
        rng = np.random.default_rng(self.seed + 1)
        f = random_rank2_fundamental(rng)
        flow = self._random_flow(rng)
        analytic = grad_l_sed(flow, f).gradient
        report = l_sed(flow, f)
        numeric = self._finite_difference(flow, lambda fl: l_sed(fl, f).per_pixel)

        usable = flow.valid & np.isfinite(report.per_pixel)
        near_kink = usable & (report.per_pixel < KINK_DISTANCE)
        checked = usable & ~near_kink
        return self._compare('L_SED', analytic, numeric, checked, int(near_kink.sum()))

    def run_all_checks(self) -> Dict[str, Any]:
        """运行全部梯度校验"""
        self.logger.info("开始梯度校验...")
        start = time.perf_counter()
        results = {
            'l_syn': self.check_l_syn(),
            'l_sed': self.check_l_sed(),
        }
        results['passed'] = all(r['passed'] for r in results.values())
        results['elapsed_seconds'] = round(time.perf_counter() - start, 3)
        self.logger.info(f"梯度校验完成: {'通过' if results['passed'] else '未通过'}")
        return results
