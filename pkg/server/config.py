"""
Federation configuration: loading, validation and path canonicalization.

The config file is YAML with the sections ``federation``, ``auth``, ``geo``,
``cache`` and ``endpoints``. The loaded ``FederationConfig`` is immutable and
shared by every request handler.
"""

import logging
import os
import re
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Optional, Tuple

import yaml

from config.settings import get_config
from server.models.geo import GeoPoint
from server.models.signer import MAX_EXPIRY

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Base class for configuration problems"""


class ConfigParseError(ConfigError):
    """The config file is not well-formed"""


class ConfigValidationError(ConfigError):
    """The config file parsed but violates an invariant"""


class EndpointKind(str, Enum):
    WEBDAV = 'webdav'
    S3 = 's3'


def validate_prefix(path: str) -> str:
    """Return the canonical form of an absolute path

    Leading slash, no trailing slash except for the root, no empty or "."
    segments. Rejects empty input, NUL bytes and ".." segments.
    """
    if not isinstance(path, str) or not path:
        raise ConfigError("Path is empty")
    if '\x00' in path:
        raise ConfigError("Path contains a NUL byte")
    segments = []
    for segment in path.split('/'):
        if segment in ('', '.'):
            continue
        if segment == '..':
            raise ConfigError(f"Path traversal is not allowed: {path!r}")
        segments.append(segment)
    return '/' + '/'.join(segments)


def path_within(path: str, prefix: str) -> bool:
    """True if ``path`` equals ``prefix`` or lies below it (both canonical)"""
    if prefix == '/':
        return True
    return path == prefix or path.startswith(prefix + '/')


def join_path(prefix: str, remainder: str) -> str:
    """Append a canonical remainder ('' or '/a/b') to a canonical prefix"""
    if not remainder:
        return prefix
    if prefix == '/':
        return remainder
    return prefix + remainder


def parent_path(path: str) -> str:
    if path == '/':
        return '/'
    head = path.rsplit('/', 1)[0]
    return head or '/'


_DURATION = re.compile(r'^\s*(\d+(?:\.\d+)?)\s*(ms|s|m|h)?\s*$')
_DURATION_UNITS = {'ms': 0.001, 's': 1.0, 'm': 60.0, 'h': 3600.0, None: 1.0}


def parse_duration(value: Any, name: str) -> float:
    """Seconds from a number or a string like '250ms', '3s', '5m', '1h'"""
    if isinstance(value, bool):
        raise ConfigValidationError(f"{name}: expected a duration, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        match = _DURATION.match(value)
        if match:
            return float(match.group(1)) * _DURATION_UNITS[match.group(2)]
    raise ConfigValidationError(f"{name}: expected a duration, got {value!r}")


def resolve_secret(value: Optional[str], name: str) -> Optional[str]:
    """Expand 'env:NAME' indirection against the process environment"""
    if isinstance(value, str) and value.startswith('env:'):
        var = value[4:]
        resolved = os.environ.get(var)
        if resolved is None:
            raise ConfigValidationError(f"{name}: environment variable {var} is not set")
        return resolved
    return value


@dataclass(frozen=True)
class EndpointConfig:
    id: str
    kind: EndpointKind
    base_url: str
    federated_prefix: str
    backend_prefix: str
    location: GeoPoint
    writable: bool = False
    s3_access_key: Optional[str] = None
    s3_secret_key: Optional[str] = None
    s3_region: Optional[str] = None
    s3_bucket: Optional[str] = None


@dataclass(frozen=True)
class FederationConfig:
    endpoints: Tuple[EndpointConfig, ...]
    listen_address: str = '127.0.0.1:8080'
    fanout_timeout: float = 3.0
    fanout_workers: int = 64
    health_poll_interval: float = 30.0
    probe_timeout: float = 2.0
    failure_threshold: int = 2
    cache_ttl_positive: float = 300.0
    cache_ttl_negative: float = 30.0
    l1_max_entries: int = 10000
    l2: str = 'memory'
    presign_expiry: float = 3600.0
    geo_db_path: Optional[str] = None
    members_path: Optional[str] = None
    privileged_path: Optional[str] = None
    required_attribute_prefix: str = '/atlas'
    scratch_prefix: str = '/scratch'
    insecure_header_auth: bool = False
    trust_forwarded_for: bool = False

    @property
    def listen_host(self) -> str:
        return self.listen_address.rsplit(':', 1)[0].strip('[]')

    @property
    def listen_port(self) -> int:
        return int(self.listen_address.rsplit(':', 1)[1])

    def endpoint(self, endpoint_id: str) -> EndpointConfig:
        for endpoint in self.endpoints:
            if endpoint.id == endpoint_id:
                return endpoint
        raise KeyError(endpoint_id)


_SECTIONS = {
    'federation': {
        'listen_address', 'fanout_timeout', 'fanout_workers', 'health_poll_interval',
        'probe_timeout', 'failure_threshold', 'presign_expiry', 'insecure_header_auth',
        'trust_forwarded_for',
    },
    'auth': {'members_path', 'privileged_path', 'required_attribute_prefix', 'scratch_prefix'},
    'geo': {'db_path'},
    'cache': {'ttl_positive', 'ttl_negative', 'l1_max_entries', 'l2'},
}
_ENDPOINT_KEYS = {
    'id', 'kind', 'base_url', 'federated_prefix', 'backend_prefix', 'location', 'writable',
    's3_access_key', 's3_secret_key', 's3_region', 's3_bucket',
}
_S3_KEYS = ('s3_access_key', 's3_secret_key', 's3_region', 's3_bucket')


def _section(document: Mapping[str, Any], name: str) -> Mapping[str, Any]:
    section = document.get(name) or {}
    if not isinstance(section, dict):
        raise ConfigValidationError(f"{name}: expected a mapping")
    unknown = sorted(set(section) - _SECTIONS[name])
    if unknown:
        raise ConfigValidationError(f"{name}: unknown key {unknown[0]!r}")
    return section


def _resolve_file(path: Optional[str], base_dir: str) -> Optional[str]:
    if not path:
        return None
    path = os.path.expanduser(str(path))
    if not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    return os.path.normpath(path)


def _canonical_prefix(value: Any, name: str) -> str:
    if not isinstance(value, str) or not value.startswith('/'):
        raise ConfigValidationError(f"{name}: expected an absolute path, got {value!r}")
    try:
        return validate_prefix(value)
    except ConfigError as e:
        raise ConfigValidationError(f"{name}: {str(e)}")


def _parse_location(value: Any, name: str) -> GeoPoint:
    try:
        if isinstance(value, dict):
            return GeoPoint.parse(value['lat'], value['lon'])
        if isinstance(value, (list, tuple)) and len(value) == 2:
            return GeoPoint.parse(*value)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigValidationError(f"{name}: invalid location ({str(e)})")
    raise ConfigValidationError(f"{name}: location must be {{lat, lon}} or [lat, lon]")


def _parse_endpoint(raw: Any, index: int) -> EndpointConfig:
    where = f"endpoints[{index}]"
    if not isinstance(raw, dict):
        raise ConfigValidationError(f"{where}: expected a mapping")
    unknown = sorted(set(raw) - _ENDPOINT_KEYS)
    if unknown:
        raise ConfigValidationError(f"{where}: unknown key {unknown[0]!r}")

    endpoint_id = raw.get('id')
    if not isinstance(endpoint_id, str) or not endpoint_id.strip():
        raise ConfigValidationError(f"{where}: endpoint id must be a non-empty string")
    where = f"endpoint {endpoint_id!r}"

    try:
        kind = EndpointKind(raw.get('kind'))
    except ValueError:
        raise ConfigValidationError(f"{where}: kind must be one of webdav, s3")

    base_url = raw.get('base_url')
    if not isinstance(base_url, str) or not re.match(r'^https?://[^/\s]+', base_url):
        raise ConfigValidationError(f"{where}: base_url must be an http(s) URL")

    s3 = {key: resolve_secret(raw.get(key), f"{where}: {key}") for key in _S3_KEYS}
    if kind is EndpointKind.S3:
        missing = [key for key in _S3_KEYS if not s3[key]]
        if missing:
            raise ConfigValidationError(f"{where}: s3 endpoint requires {missing[0]}")
    else:
        present = [key for key in _S3_KEYS if raw.get(key) is not None]
        if present:
            raise ConfigValidationError(f"{where}: {present[0]} is only valid for s3 endpoints")

    return EndpointConfig(
        id=endpoint_id,
        kind=kind,
        base_url=base_url.rstrip('/'),
        federated_prefix=_canonical_prefix(raw.get('federated_prefix', '/'), f"{where}: federated_prefix"),
        backend_prefix=_canonical_prefix(raw.get('backend_prefix', '/'), f"{where}: backend_prefix"),
        location=_parse_location(raw.get('location'), where),
        writable=bool(raw.get('writable', False)),
        **s3,
    )


def build_config(document: Any, base_dir: str = '.') -> FederationConfig:
    """Validate a parsed config document and fill in defaults"""
    if not isinstance(document, dict):
        raise ConfigValidationError("Config root must be a mapping")
    unknown = sorted(set(document) - set(_SECTIONS) - {'endpoints'})
    if unknown:
        raise ConfigValidationError(f"Unknown section {unknown[0]!r}")

    defaults = get_config()
    federation = _section(document, 'federation')
    auth = _section(document, 'auth')
    geo = _section(document, 'geo')
    cache = _section(document, 'cache')

    raw_endpoints = document.get('endpoints') or []
    if not isinstance(raw_endpoints, list) or not raw_endpoints:
        raise ConfigValidationError("At least one endpoint must be configured")
    endpoints = tuple(_parse_endpoint(raw, i) for i, raw in enumerate(raw_endpoints))
    seen = set()
    for endpoint in endpoints:
        if endpoint.id in seen:
            raise ConfigValidationError(f"Duplicate endpoint id {endpoint.id!r}")
        seen.add(endpoint.id)

    def duration(section, key, default_key):
        return parse_duration(section.get(key, defaults[default_key]), key)

    def integer(section, key, default_key):
        value = section.get(key, defaults[default_key])
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(f"{key}: expected an integer, got {value!r}")
        return value

    config = FederationConfig(
        endpoints=endpoints,
        listen_address=str(federation.get('listen_address', defaults['LISTEN_ADDRESS'])),
        fanout_timeout=duration(federation, 'fanout_timeout', 'FANOUT_TIMEOUT'),
        fanout_workers=integer(federation, 'fanout_workers', 'FANOUT_WORKERS'),
        health_poll_interval=duration(federation, 'health_poll_interval', 'HEALTH_POLL_INTERVAL'),
        probe_timeout=duration(federation, 'probe_timeout', 'PROBE_TIMEOUT'),
        failure_threshold=integer(federation, 'failure_threshold', 'FAILURE_THRESHOLD'),
        presign_expiry=duration(federation, 'presign_expiry', 'PRESIGN_EXPIRY'),
        insecure_header_auth=bool(federation.get('insecure_header_auth', defaults['INSECURE_HEADER_AUTH'])),
        trust_forwarded_for=bool(federation.get('trust_forwarded_for', defaults['TRUST_FORWARDED_FOR'])),
        cache_ttl_positive=duration(cache, 'ttl_positive', 'CACHE_TTL_POSITIVE'),
        cache_ttl_negative=duration(cache, 'ttl_negative', 'CACHE_TTL_NEGATIVE'),
        l1_max_entries=integer(cache, 'l1_max_entries', 'L1_MAX_ENTRIES'),
        l2=str(cache.get('l2', defaults['L2'])),
        geo_db_path=_resolve_file(geo.get('db_path'), base_dir),
        members_path=_resolve_file(auth.get('members_path'), base_dir),
        privileged_path=_resolve_file(auth.get('privileged_path'), base_dir),
        required_attribute_prefix=_canonical_prefix(
            auth.get('required_attribute_prefix', defaults['REQUIRED_ATTRIBUTE_PREFIX']),
            'required_attribute_prefix'),
        scratch_prefix=_canonical_prefix(
            auth.get('scratch_prefix', defaults['SCRATCH_PREFIX']), 'scratch_prefix'),
    )
    validate_config(config)
    return config


def validate_config(config: FederationConfig) -> None:
    """Check the numeric invariants of a FederationConfig"""
    if config.fanout_timeout <= 0:
        raise ConfigValidationError("fanout_timeout must be > 0")
    if not 1 <= config.presign_expiry <= MAX_EXPIRY:
        raise ConfigValidationError(
            f"presign_expiry must be within [1, {MAX_EXPIRY}] seconds, got {config.presign_expiry:g}")
    if config.cache_ttl_positive < 0 or config.cache_ttl_negative < 0:
        raise ConfigValidationError("cache TTLs must be >= 0")
    if config.health_poll_interval <= 0 or config.probe_timeout <= 0:
        raise ConfigValidationError("health_poll_interval and probe_timeout must be > 0")
    if config.failure_threshold < 1:
        raise ConfigValidationError("failure_threshold must be >= 1")
    if config.fanout_workers < 1 or config.l1_max_entries < 1:
        raise ConfigValidationError("fanout_workers and l1_max_entries must be >= 1")
    if not re.match(r'^(\[[0-9a-fA-F:]+\]|[^:\s]+):\d+$', config.listen_address):
        raise ConfigValidationError(f"listen_address must be host:port, got {config.listen_address!r}")
    if config.l2 != 'memory' and not re.match(r'^memcached://[^:/\s]+:\d+$', config.l2):
        raise ConfigValidationError(f"l2 must be 'memory' or memcached://host:port, got {config.l2!r}")


def load_config(path: str) -> FederationConfig:
    """Read, parse and validate a federation config file"""
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as e:
        raise ConfigParseError(f"Cannot read config {path}: {str(e)}")
    try:
        document = yaml.safe_load(raw.decode('utf-8'))
    except (UnicodeDecodeError, yaml.YAMLError) as e:
        raise ConfigParseError(f"Malformed config {path}: {str(e)}")
    config = build_config(document, os.path.dirname(os.path.abspath(path)))
    logger.info(f"Loaded federation config from {path} with {len(config.endpoints)} endpoints")
    return config


class FlaskConfig:
    """Base Flask configuration class"""
    SECRET_KEY = os.environ.get('SECRET_KEY') or 'dev-secret-key-change-in-production'
    JSON_SORT_KEYS = False
    DEBUG = False
    TESTING = False


class DevelopmentConfig(FlaskConfig):
    """Development configuration"""
    DEBUG = True


class ProductionConfig(FlaskConfig):
    """Production configuration"""


class TestingConfig(FlaskConfig):
    """Testing configuration"""
    TESTING = True


# Configuration dictionary
flask_config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': ProductionConfig,
}
