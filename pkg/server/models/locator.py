"""
Replica resolution for federated paths.

A lookup consults L1, then L2; on a miss it queries every eligible endpoint
whose federated prefix covers the path, in parallel, and keeps whatever
answered before the fan-out deadline. Responses arriving later are dropped.
Concurrent misses for the same key share one fan-out.
"""

import hashlib
import logging
import struct
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

from server.config import FederationConfig, EndpointConfig, join_path, parent_path, path_within
from server.models.cache import LocalCache, SharedCache
from server.models.endpoints import (
    Endpoint, EndpointError, EndpointNotADirectory, EndpointNotFound, EndpointTimeout, Listing,
    ListingEntry,
)
from server.models.metrics import GatewayMetrics

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReplicaLocation:
    endpoint_id: str
    backend_path: str
    size: Optional[int] = None
    is_directory: bool = False
    modified: Optional[float] = None


@dataclass(frozen=True)
class ReplicaSet:
    federated_path: str
    replicas: Tuple[ReplicaLocation, ...]
    resolved_at: float
    complete: bool

    def __post_init__(self):
        ids = [replica.endpoint_id for replica in self.replicas]
        if len(ids) != len(set(ids)):
            raise ValueError("At most one replica per endpoint")

    @property
    def found(self) -> bool:
        return bool(self.replicas)


@dataclass(frozen=True)
class MergedListing:
    federated_path: str
    listing: Listing
    exists: bool
    complete: bool
    resolved_at: float


@dataclass(frozen=True)
class CacheEntry:
    value: Union[ReplicaSet, MergedListing]
    expires_at: float
    negative: bool = False

    def __post_init__(self):
        if self.negative and _has_content(self.value):
            raise ValueError("A negative entry carries no replicas")


def _has_content(value) -> bool:
    if isinstance(value, ReplicaSet):
        return bool(value.replicas)
    return value.exists


# Record layout: magic, version, record kind, negative flag, complete flag,
# expires_at, resolved_at, then length-prefixed fields.
_MAGIC = b'FG'
_VERSION = 1
_KIND_REPLICAS = 1
_KIND_LISTING = 2
_HEADER = struct.Struct('!2sBBBBdd')
_U16 = struct.Struct('!H')
_U32 = struct.Struct('!I')
_I64 = struct.Struct('!q')
_F64 = struct.Struct('!d')


class RecordError(ValueError):
    """An L2 record could not be decoded"""


def _pack_str(value: str, width: struct.Struct = _U32) -> bytes:
    raw = value.encode('utf-8')
    return width.pack(len(raw)) + raw


def _pack_optional_int(value: Optional[int]) -> bytes:
    return _I64.pack(-1 if value is None else value)


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, fmt: struct.Struct):
        if self.offset + fmt.size > len(self.data):
            raise RecordError("Truncated record")
        values = fmt.unpack_from(self.data, self.offset)
        self.offset += fmt.size
        return values[0] if len(values) == 1 else values

    def string(self, width: struct.Struct = _U32) -> str:
        length = self.take(width)
        end = self.offset + length
        if end > len(self.data):
            raise RecordError("Truncated record")
        value = self.data[self.offset:end].decode('utf-8')
        self.offset = end
        return value

    def optional_int(self) -> Optional[int]:
        value = self.take(_I64)
        return None if value < 0 else value

    def flag(self) -> bool:
        return bool(self.take(struct.Struct('!B')))


def encode_entry(entry: CacheEntry) -> bytes:
    value = entry.value
    kind = _KIND_REPLICAS if isinstance(value, ReplicaSet) else _KIND_LISTING
    out = [_HEADER.pack(_MAGIC, _VERSION, kind, int(entry.negative), int(value.complete),
                        entry.expires_at, value.resolved_at),
           _pack_str(value.federated_path)]
    if isinstance(value, ReplicaSet):
        out.append(_U32.pack(len(value.replicas)))
        for replica in value.replicas:
            out.append(_pack_str(replica.endpoint_id, _U16))
            out.append(_pack_str(replica.backend_path))
            out.append(_pack_optional_int(replica.size))
            out.append(bytes([int(replica.is_directory)]))
            out.append(_F64.pack(float('nan') if replica.modified is None else replica.modified))
    else:
        out.append(bytes([int(value.exists)]))
        out.append(_U32.pack(len(value.listing.entries)))
        for item in value.listing.entries:
            out.append(_pack_str(item.name))
            out.append(bytes([int(item.is_directory)]))
            out.append(_pack_optional_int(item.size))
    return b''.join(out)


def decode_entry(data: bytes) -> CacheEntry:
    if len(data) < _HEADER.size:
        raise RecordError("Truncated record")
    magic, version, kind, negative, complete, expires_at, resolved_at = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC or version != _VERSION:
        raise RecordError(f"Unsupported record {magic!r} v{version}")
    reader = _Reader(data, _HEADER.size)
    path = reader.string()
    if kind == _KIND_REPLICAS:
        replicas = []
        for _ in range(reader.take(_U32)):
            endpoint_id = reader.string(_U16)
            backend_path = reader.string()
            size = reader.optional_int()
            is_directory = reader.flag()
            modified = reader.take(_F64)
            replicas.append(ReplicaLocation(endpoint_id, backend_path, size, is_directory,
                                            None if modified != modified else modified))
        value = ReplicaSet(path, tuple(replicas), resolved_at, bool(complete))
    elif kind == _KIND_LISTING:
        exists = reader.flag()
        entries = []
        for _ in range(reader.take(_U32)):
            name = reader.string()
            is_directory = reader.flag()
            entries.append(ListingEntry(name, is_directory, reader.optional_int()))
        value = MergedListing(path, Listing(tuple(entries)), exists, bool(complete), resolved_at)
    else:
        raise RecordError(f"Unknown record kind {kind}")
    if reader.offset != len(data):
        raise RecordError("Trailing bytes in record")
    return CacheEntry(value, expires_at, bool(negative))


def cache_key(kind: str, path: str) -> str:
    return f"{kind}:{hashlib.sha256(path.encode('utf-8')).hexdigest()}"


def translate(path: str, endpoint: EndpointConfig) -> Optional[str]:
    """Backend path for ``path`` on ``endpoint``, or None when not covered"""
    prefix = endpoint.federated_prefix
    if not path_within(path, prefix):
        return None
    remainder = path if prefix == '/' else path[len(prefix):]
    return join_path(endpoint.backend_prefix, '' if remainder == '/' else remainder)


def virtual_children(path: str, endpoints) -> List[str]:
    """Next segments of federated prefixes that lie strictly below ``path``"""
    children = set()
    for config in endpoints:
        prefix = config.federated_prefix
        if prefix != path and path_within(prefix, path):
            remainder = prefix[len(path):] if path != '/' else prefix
            children.add(remainder.lstrip('/').split('/', 1)[0])
    return sorted(children)


@dataclass
class _FanOut:
    results: Dict[str, object] = field(default_factory=dict)
    complete: bool = True


class SingleFlight:
    """Coalesce concurrent calls with the same key into one execution"""

    def __init__(self):
        self._lock = threading.Lock()
        self._flights: Dict[str, Future] = {}

    def do(self, key: str, fn: Callable[[], object]):
        with self._lock:
            flight = self._flights.get(key)
            leader = flight is None
            if leader:
                flight = self._flights[key] = Future()
        if not leader:
            return flight.result()
        try:
            result = fn()
        except BaseException as e:
            flight.set_exception(e)
            raise
        else:
            flight.set_result(result)
            return result
        finally:
            with self._lock:
                self._flights.pop(key, None)


class Locator:
    """Resolves federated paths against the attached endpoints"""

    def __init__(self, config: FederationConfig, endpoints: Mapping[str, Endpoint],
                 l1: LocalCache, l2: SharedCache, metrics: Optional[GatewayMetrics] = None,
                 clock: Callable[[], float] = time.time):
        self.config = config
        self.endpoints = endpoints
        self.l1 = l1
        self.l2 = l2
        self.metrics = metrics if metrics is not None else GatewayMetrics()
        self.clock = clock
        self._flights = SingleFlight()
        # bumped by invalidate; a resolve started under an older generation is not cached
        self._generations: Dict[str, int] = {}
        self._generation_lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=config.fanout_workers,
                                            thread_name_prefix='fedgate-fanout')

    def close(self):
        self._executor.shutdown(wait=False, cancel_futures=True)

    def covering(self, path: str) -> List[Tuple[Endpoint, str]]:
        """Eligible endpoints whose prefix covers ``path``, with backend paths"""
        covering = []
        for endpoint_id in sorted(self.endpoints):
            endpoint = self.endpoints[endpoint_id]
            backend_path = translate(path, endpoint.config)
            if backend_path is not None and endpoint.eligible:
                covering.append((endpoint, backend_path))
        return covering

    def is_virtual_directory(self, path: str) -> bool:
        return path == '/' or bool(virtual_children(path, (e.config for e in self.endpoints.values())))

    # cache plumbing

    def _cached(self, key: str, now: float) -> Optional[CacheEntry]:
        entry = self.l1.get(key, now)
        if entry is not None:
            self.metrics.cache_hits.labels(level='l1').inc()
            return entry
        raw = self.l2.get(key)
        if raw is not None:
            try:
                entry = decode_entry(raw)
            except (RecordError, UnicodeDecodeError, ValueError) as e:
                logger.warning(f"Discarding undecodable L2 record {key}: {str(e)}")
                entry = None
            if entry is not None and entry.expires_at > now:
                self.l1.set(key, entry, entry.expires_at)
                self.metrics.cache_hits.labels(level='l2').inc()
                return entry
        self.metrics.cache_misses.inc()
        return None

    def _generation(self, key: str) -> int:
        with self._generation_lock:
            return self._generations.get(key, 0)

    def _store(self, key: str, value: Union[ReplicaSet, MergedListing], now: float,
               generation: int) -> None:
        positive = value.complete and _has_content(value)
        ttl = self.config.cache_ttl_positive if positive else self.config.cache_ttl_negative
        if ttl <= 0:
            return
        entry = CacheEntry(value, now + ttl, negative=value.complete and not _has_content(value))
        with self._generation_lock:
            if self._generations.get(key, 0) != generation:
                logger.debug(f"Not caching {value.federated_path}: invalidated while resolving")
                return
            self.l1.set(key, entry, entry.expires_at)
            self.l2.set(key, encode_entry(entry), ttl)

    def _fan_out(self, op: str, targets: List[Tuple[Endpoint, str]]) -> _FanOut:
        outcome = _FanOut()
        if not targets:
            return outcome
        deadline = time.monotonic() + self.config.fanout_timeout
        futures = {
            self._executor.submit(getattr(endpoint, op), backend_path, deadline): endpoint
            for endpoint, backend_path in targets
        }
        done, pending = wait(futures, timeout=max(0.0, deadline - time.monotonic()))
        for future in pending:
            endpoint = futures[future]
            endpoint.record_timeout()
            outcome.complete = False
            logger.warning(f"{op} on {endpoint.id} missed the {self.config.fanout_timeout}s deadline")
        for future in done:
            endpoint = futures[future]
            try:
                outcome.results[endpoint.id] = future.result()
            except (EndpointNotFound, EndpointNotADirectory):
                continue
            except EndpointTimeout as e:
                endpoint.record_timeout()
                outcome.complete = False
                logger.warning(f"{op} timed out: {str(e)}")
            except EndpointError as e:
                outcome.complete = False
                logger.warning(f"{op} failed: {str(e)}")
            except Exception as e:
                outcome.complete = False
                logger.error(f"{op} on {endpoint.id} raised unexpectedly: {str(e)}")
        return outcome

    # operations

    def locate(self, path: str, now: Optional[float] = None) -> ReplicaSet:
        """Replica set for ``path`` from cache or a fresh fan-out"""
        now = self.clock() if now is None else now
        key = cache_key('loc', path)
        entry = self._cached(key, now)
        if entry is not None:
            return entry.value
        generation = self._generation(key)
        return self._flights.do(f"{key}:{generation}", lambda: self._resolve(path, key, generation))

    def _resolve(self, path: str, key: str, generation: int) -> ReplicaSet:
        now = self.clock()
        # another flight may have finished between the miss and now
        entry = self.l1.get(key, now)
        if entry is not None:
            return entry.value
        targets = self.covering(path)
        backend_paths = {endpoint.id: backend_path for endpoint, backend_path in targets}
        outcome = self._fan_out('stat', targets)
        replicas = tuple(
            ReplicaLocation(endpoint_id, backend_paths[endpoint_id], result.size,
                            result.is_directory, result.modified)
            for endpoint_id, result in sorted(outcome.results.items())
            if result.exists
        )
        replica_set = ReplicaSet(path, replicas, now, outcome.complete)
        self._store(key, replica_set, now, generation)
        logger.debug(f"Resolved {path}: {len(replicas)} replicas, complete={outcome.complete}")
        return replica_set

    def merged_listing(self, path: str, now: Optional[float] = None) -> MergedListing:
        """Union of the directory listings of every covering endpoint"""
        now = self.clock() if now is None else now
        key = cache_key('dir', path)
        entry = self._cached(key, now)
        if entry is not None:
            return entry.value
        generation = self._generation(key)
        return self._flights.do(f"{key}:{generation}", lambda: self._merge(path, key, generation))

    def _merge(self, path: str, key: str, generation: int) -> MergedListing:
        now = self.clock()
        entry = self.l1.get(key, now)
        if entry is not None:
            return entry.value
        outcome = self._fan_out('list', self.covering(path))
        entries = []
        # lexicographic endpoint order decides size conflicts
        for endpoint_id in sorted(outcome.results):
            entries.extend(outcome.results[endpoint_id].entries)
        virtual = virtual_children(path, (e.config for e in self.endpoints.values()))
        entries.extend(ListingEntry(name, True) for name in virtual)
        exists = bool(outcome.results) or bool(virtual) or path == '/'
        merged = MergedListing(path, Listing.from_entries(entries), exists, outcome.complete, now)
        self._store(key, merged, now, generation)
        return merged

    def invalidate(self, path: str) -> None:
        """Drop cached knowledge of ``path`` and its parent's listing"""
        keys = {cache_key('loc', path), cache_key('dir', path), cache_key('dir', parent_path(path))}
        with self._generation_lock:
            for key in keys:
                self._generations[key] = self._generations.get(key, 0) + 1
        for key in keys:
            self.l1.delete(key)
            self.l2.delete(key)
