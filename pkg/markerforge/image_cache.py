# markerforge/image_cache.py
"""
解码图片的LRU缓存
标记图和背景图会在许多样本之间复用，缓存避免重复解码
"""
import os
import threading
import logging
from collections import OrderedDict
from typing import Any, Callable, Dict

logger = logging.getLogger(__name__)


class ImageCache:
    """按绝对路径缓存解码后的图片，超出容量时淘汰最久未使用的一张"""

    def __init__(self, loader: Callable[[str], Any], max_size: int = 64):
        """
        Args:
            loader: 读取图片的函数，参数为路径
            max_size: 最多缓存的图片数量，0 表示不缓存
        """
        self.loader = loader
        self.max_size = max_size
        self._images: 'OrderedDict[str, Any]' = OrderedDict()
        self._lock = threading.RLock()
        self._hits = 0
        self._misses = 0
        self._evictions = 0

    def load(self, path: str) -> Any:
        """读取图片，命中缓存时直接返回（图片对象不可变，可安全共享）"""
        key = os.path.abspath(path)
        with self._lock:
            if key in self._images:
                self._images.move_to_end(key)
                self._hits += 1
                return self._images[key]
            self._misses += 1
        # 解码在锁外进行，并发未命中时同一张图可能被解码两次
        image = self.loader(path)
        if self.max_size <= 0:
            return image
        with self._lock:
            self._images[key] = image
            self._images.move_to_end(key)
            while len(self._images) > self.max_size:
                evicted, _ = self._images.popitem(last=False)
                self._evictions += 1
                logger.debug(f"图片缓存已满，淘汰: {evicted}")
        logger.debug(f"图片已解码并缓存: {path}")
        return image

    def get_stats(self) -> Dict[str, Any]:
        """缓存统计，用于生成与基准结束时的日志"""
        with self._lock:
            total = self._hits + self._misses
            pixels_mb = sum(getattr(getattr(img, 'data', None), 'nbytes', 0) for img in self._images.values())
            return {
                'hits': self._hits,
                'misses': self._misses,
                'evictions': self._evictions,
                'hit_rate': round(self._hits / total, 4) if total else 0.0,
                'current_size': len(self._images),
                'max_size': self.max_size,
                'cached_mb': round(pixels_mb / (1024 * 1024), 1),
            }
