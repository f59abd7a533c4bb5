# markerforge/flow_io.py
"""
光流与损失图文件读写
.flo 为 Middlebury 格式：魔数 202021.25 (float32) + 宽高 (int32) + 逐像素交错的 (dx, dy) float32
"""
import io
import logging
from typing import Any, Dict

import numpy as np
from PIL import Image as PILImage

from .errors import DataError
from .imaging import FlowField, FLOW_SENTINEL
from .utils import atomic_write_bytes, write_json, read_json

logger = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
_HEADER = np.dtype([('magic', '<f4'), ('width', '<i4'), ('height', '<i4')])


def encode_flo(flow: FlowField) -> bytes:
    """编码为 .flo 字节，无效像素写为哨兵位移"""
    header = np.array([(FLO_MAGIC, flow.width, flow.height)], dtype=_HEADER)
    disp = flow.displacement()
    disp[~flow.valid] = FLOW_SENTINEL
    return header.tobytes() + disp.astype('<f4').tobytes()


def decode_flo(payload: bytes, source: str = '<bytes>') -> FlowField:
    """
    解码 .flo 字节

    Args:
        payload: 文件内容
        source: 用于错误信息的来源描述

    Returns:
        FlowField（绝对目标坐标由位移重建）
    """
    if len(payload) < _HEADER.itemsize:
        raise DataError(f"光流文件过短: {source}")
    header = np.frombuffer(payload[:_HEADER.itemsize], dtype=_HEADER)[0]
    if float(header['magic']) != FLO_MAGIC:
        raise DataError(f"光流文件魔数错误: {source} ({float(header['magic'])})")
    width, height = int(header['width']), int(header['height'])
    if width < 2 or height < 2:
        raise DataError(f"光流尺寸非法: {source} ({width}×{height})")
    expected = _HEADER.itemsize + width * height * 2 * 4
    if len(payload) != expected:
        raise DataError(f"光流文件长度不符: {source}，期望 {expected} 字节，实际 {len(payload)} 字节")
    disp = np.frombuffer(payload[_HEADER.itemsize:], dtype='<f4').reshape(height, width, 2)
    return FlowField.from_displacement(disp.astype(np.float64))


def write_flo(path: str, flow: FlowField) -> None:
    atomic_write_bytes(path, encode_flo(flow))


def read_flo(path: str) -> FlowField:
    try:
        with open(path, 'rb') as f:
            payload = f.read()
    except FileNotFoundError as e:
        raise DataError(f"光流文件不存在: {path}") from e
    except OSError as e:
        raise DataError(f"读取光流文件失败: {path}: {e}") from e
    return decode_flo(payload, path)


def failed_record_path(flow_path: str) -> str:
    """估计失败时的占位记录路径"""
    return f"{flow_path}.failed.json"


def write_failed_record(flow_path: str, reason: str) -> str:
    """
    在请求的光流路径旁写入失败记录

    Returns:
        记录文件路径
    """
    path = failed_record_path(flow_path)
    write_json(path, {'outcome': 'failed', 'reason': reason})
    logger.info(f"估计失败，已写入失败记录: {path}")
    return path


def read_failed_record(flow_path: str) -> Dict[str, Any]:
    data = read_json(failed_record_path(flow_path))
    if not isinstance(data, dict) or data.get('outcome') != 'failed':
        raise DataError(f"失败记录格式错误: {failed_record_path(flow_path)}")
    return data


def write_loss_map(path: str, values: np.ndarray) -> None:
    """
    把逐像素损失写为32位浮点单通道TIFF，未使用的像素为 NaN

    Args:
        path: 输出路径
        values: (H, W) 数组
    """
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise DataError(f"损失图应为二维，实际为 {values.shape}")
    buffer = io.BytesIO()
    PILImage.fromarray(values, mode='F').save(buffer, format='TIFF')
    atomic_write_bytes(path, buffer.getvalue())
