# markerforge/utils.py
import os
import json
import hashlib
import logging
from typing import Any, List

from .errors import DataError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {'.jpg', '.jpeg', '.png', '.bmp', '.tif', '.tiff', '.webp'}


# 路径相关工具函数
def ensure_dir_exists(directory):
    """确保目录存在，如果不存在则创建"""
    if not os.path.exists(directory):
        os.makedirs(directory, exist_ok=True)
        logger.debug(f"创建目录: {directory}")
    return directory


def get_file_extension(filename):
    """获取文件扩展名（小写）"""
    return os.path.splitext(filename.lower())[1] if filename else ""


def is_image_file(filename):
    """检查文件是否为支持的图片格式"""
    return get_file_extension(filename) in IMAGE_EXTENSIONS


def list_image_files(directory: str) -> List[str]:
    """
    列出目录下的图片文件，按文件名排序以保证确定性

    Args:
        directory: 图片目录

    Returns:
        图片路径列表
    """
    if not os.path.isdir(directory):
        raise DataError(f"图片目录不存在: {directory}")
    names = sorted(n for n in os.listdir(directory)
                   if is_image_file(n) and os.path.isfile(os.path.join(directory, n)))
    return [os.path.join(directory, n) for n in names]


# 文件读写
def atomic_write_bytes(path: str, data: bytes) -> None:
    """
    原子地写入文件：先写临时文件再重命名

    Args:
        path: 目标路径
        data: 文件内容
    """
    target_dir = os.path.dirname(path)
    if target_dir:
        ensure_dir_exists(target_dir)
    temp_path = f"{path}.tmp.{os.getpid()}"
    try:
        with open(temp_path, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(temp_path, path)
    except OSError as e:
        try:
            if os.path.exists(temp_path):
                os.remove(temp_path)
        except OSError:
            pass
        raise DataError(f"写入文件失败: {path}: {e}") from e


def dumps_json(data: Any) -> str:
    """固定键顺序的JSON序列化，保证输出字节稳定"""
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path: str, data: Any) -> None:
    """写入JSON文件"""
    atomic_write_bytes(path, dumps_json(data).encode('utf-8'))


def read_json(path: str) -> Any:
    """读取JSON文件"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise DataError(f"文件不存在: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"读取JSON失败: {path}: {e}") from e


# 摘要
def file_sha256(path: str) -> str:
    """计算文件的SHA-256摘要"""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def tree_digest(root: str) -> str:
    """
    计算目录树的摘要：包含每个文件的相对路径与内容

    Args:
        root: 根目录

    Returns:
        十六进制摘要
    """
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, root).replace(os.sep, '/')
            digest.update(rel.encode('utf-8'))
            digest.update(b'\0')
            digest.update(file_sha256(path).encode('ascii'))
    return digest.hexdigest()
