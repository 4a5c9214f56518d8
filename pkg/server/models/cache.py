"""
Two-level cache for resolution results.

L1 is a bounded, TTL-evicting map private to one gateway process. L2 is
shared between load-balanced gateways: either an in-process byte store
(tests, single instance) or memcached. L2 failures are logged and treated
as misses.
"""

import logging
import math
import threading
import time
from abc import ABC, abstractmethod
from collections import OrderedDict
from typing import Any, Dict, Optional, Tuple

from pymemcache.client.base import PooledClient

logger = logging.getLogger(__name__)


class LocalCache:
    """Thread-safe LRU map whose values carry an absolute expiry time"""

    def __init__(self, max_entries: int = 10000):
        self.max_entries = max_entries
        self._entries: 'OrderedDict[str, Tuple[float, Any]]' = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key: str, now: Optional[float] = None) -> Optional[Any]:
        now = time.time() if now is None else now
        with self._lock:
            item = self._entries.get(key)
            if item is None:
                return None
            expires_at, value = item
            if expires_at <= now:
                del self._entries[key]
                return None
            self._entries.move_to_end(key)
            return value

    def set(self, key: str, value: Any, expires_at: float) -> None:
        with self._lock:
            self._entries[key] = (expires_at, value)
            self._entries.move_to_end(key)
            while len(self._entries) > self.max_entries:
                self._entries.popitem(last=False)

    def delete(self, key: str) -> None:
        with self._lock:
            self._entries.pop(key, None)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()

    def __len__(self):
        with self._lock:
            return len(self._entries)


class SharedCache(ABC):
    """Second-level cache holding encoded records"""

    @abstractmethod
    def get(self, key: str) -> Optional[bytes]:
        ...

    @abstractmethod
    def set(self, key: str, value: bytes, ttl: float) -> None:
        ...

    @abstractmethod
    def delete(self, key: str) -> None:
        ...

    def close(self) -> None:
        pass


class InProcessSharedCache(SharedCache):
    """L2 stand-in living in the current process; several gateways may share one"""

    def __init__(self, clock=time.time):
        self._clock = clock
        self._data: Dict[str, Tuple[float, bytes]] = {}
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            item = self._data.get(key)
            if item is None:
                return None
            expires_at, value = item
            if expires_at <= self._clock():
                del self._data[key]
                return None
            return value

    def set(self, key, value, ttl):
        if ttl <= 0:
            return
        with self._lock:
            self._data[key] = (self._clock() + ttl, bytes(value))

    def delete(self, key):
        with self._lock:
            self._data.pop(key, None)

    def __len__(self):
        with self._lock:
            return len(self._data)


class MemcachedSharedCache(SharedCache):
    """memcached text protocol (get/set/delete, flags=0, exptime=TTL seconds)"""

    def __init__(self, host: str, port: int, timeout: float = 0.3, client=None):
        self.server = (host, port)
        self._client = client or PooledClient(
            self.server, connect_timeout=timeout, timeout=timeout, no_delay=True)

    @classmethod
    def from_url(cls, url: str) -> 'MemcachedSharedCache':
        host, port = url[len('memcached://'):].rsplit(':', 1)
        return cls(host, int(port))

    def get(self, key):
        try:
            return self._client.get(key)
        except Exception as e:
            logger.warning(f"L2 get {key} failed on {self.server}: {str(e)}")
            return None

    def set(self, key, value, ttl):
        expire = math.ceil(ttl)
        if expire <= 0:
            return
        try:
            self._client.set(key, value, expire=expire, noreply=False)
        except Exception as e:
            logger.warning(f"L2 set {key} failed on {self.server}: {str(e)}")

    def delete(self, key):
        try:
            self._client.delete(key, noreply=False)
        except Exception as e:
            logger.warning(f"L2 delete {key} failed on {self.server}: {str(e)}")

    def close(self):
        try:
            self._client.close()
        except Exception as e:
            logger.debug(f"L2 close failed: {str(e)}")


def build_shared_cache(spec: str) -> SharedCache:
    """'memory' or 'memcached://host:port'"""
    if spec == 'memory':
        return InProcessSharedCache()
    if spec.startswith('memcached://'):
        return MemcachedSharedCache.from_url(spec)
    raise ValueError(f"Unsupported L2 cache {spec!r}")
