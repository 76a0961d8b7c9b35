"""
Cache management for DiffuEraser Desk
Content-addressed caching of DDIM inversion results
"""
import hashlib
import json
import logging
import threading
from typing import Any, Dict, Optional

import numpy as np
import torch
from cachetools import LRUCache

from app.config import RuntimeConfig

logger = logging.getLogger(__name__)


class CacheManager:
    """LRU cache of latent tensors keyed by content hashes"""

    def __init__(self, max_entries: Optional[int] = None):
        self.max_entries = max_entries or RuntimeConfig().cache_size
        self._cache: LRUCache = LRUCache(maxsize=self.max_entries)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def create_cache_key(prefix: str, **kwargs) -> str:
        """Create a consistent cache key from parameters; arrays hash by content"""
        parts = []
        for name, value in sorted(kwargs.items()):
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            if isinstance(value, np.ndarray):
                digest = hashlib.md5(np.ascontiguousarray(value).tobytes()).hexdigest()
                value = f"{value.dtype}{list(value.shape)}:{digest}"
            parts.append((name, value))
        params_str = json.dumps(parts, sort_keys=True, default=str)
        hash_obj = hashlib.md5(params_str.encode())
        return f"{prefix}_{hash_obj.hexdigest()[:16]}"

    def get(self, key: str) -> Optional[Any]:
        with self._lock:
            value = self._cache.get(key)
            if value is None:
                self.misses += 1
            else:
                self.hits += 1
            return value

    def put(self, key: str, value: Any):
        with self._lock:
            self._cache[key] = value

    def get_or_compute(self, key: str, compute):
        cached = self.get(key)
        if cached is not None:
            logger.debug(f"Cache hit for {key}")
            return cached
        value = compute()
        self.put(key, value)
        return value

    def clear_all_cache(self):
        with self._lock:
            self._cache.clear()
            self.hits = self.misses = 0
        logger.info("All cache cleared")

    def get_cache_info(self) -> Dict[str, Any]:
        return {
            "max_entries": self.max_entries,
            "entries": len(self._cache),
            "hits": self.hits,
            "misses": self.misses,
        }


_cache_manager: Optional[CacheManager] = None
_cache_lock = threading.Lock()


def get_cache_manager() -> CacheManager:
    """Process-wide cache manager instance"""
    global _cache_manager
    with _cache_lock:
        if _cache_manager is None:
            _cache_manager = CacheManager()
        return _cache_manager


def clear_latent_cache():
    get_cache_manager().clear_all_cache()
