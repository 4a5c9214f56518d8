"""
Storage endpoint clients.

Every backend protocol implements the same small interface (stat, list,
probe, redirect_url); the locator, the health poller and the gateway only
talk to that interface. WebDAV/HTTP and S3 are implemented; further
protocols register a class in ``ENDPOINT_TYPES``.
"""

import datetime
import logging
import math
import threading
import time
import urllib.parse
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass
from email.utils import parsedate_to_datetime
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple, Type

import requests
from lxml import etree

from server.config import EndpointConfig, EndpointKind
from server.models.signer import PresignRequest, SigningError, SigningKey, presign

logger = logging.getLogger(__name__)

DAV_NS = 'DAV:'
S3_NS = 'http://s3.amazonaws.com/doc/2006-03-01/'
DIRECTORY_CONTENT_TYPE = 'httpd/unix-directory'
# lifetime of the signatures the S3 client puts on its own requests
REQUEST_SIGNATURE_EXPIRY = 300

PROPFIND_BODY = (
    b'<?xml version="1.0" encoding="utf-8"?>'
    b'<D:propfind xmlns:D="DAV:"><D:prop>'
    b'<D:resourcetype/><D:getcontentlength/><D:getlastmodified/>'
    b'</D:prop></D:propfind>'
)


class EndpointError(Exception):
    """Base class for endpoint communication failures"""

    def __init__(self, endpoint_id: str, message: str):
        super().__init__(f"{endpoint_id}: {message}")
        self.endpoint_id = endpoint_id


class EndpointTimeout(EndpointError):
    """The deadline passed before the endpoint answered"""


class EndpointTransportError(EndpointError):
    """Connection-level failure or an unexpected backend status"""


class EndpointNotFound(EndpointError):
    """The requested directory does not exist on the endpoint"""


class EndpointNotADirectory(EndpointError):
    """A listing was requested for a file"""


class EndpointStatus(str, Enum):
    ONLINE = 'online'
    OFFLINE = 'offline'
    UNKNOWN = 'unknown'


@dataclass(frozen=True)
class StatResult:
    exists: bool
    size: Optional[int] = None
    modified: Optional[float] = None
    is_directory: bool = False

    def __post_init__(self):
        if not self.exists and (self.size is not None or self.modified is not None):
            raise ValueError("A missing resource has no size or modification time")

    @classmethod
    def missing(cls) -> 'StatResult':
        return cls(exists=False)


@dataclass(frozen=True)
class ListingEntry:
    name: str
    is_directory: bool
    size: Optional[int] = None


@dataclass(frozen=True)
class Listing:
    entries: Tuple[ListingEntry, ...] = ()

    def __post_init__(self):
        names = [entry.name for entry in self.entries]
        if len(names) != len(set(names)):
            raise ValueError("Listing entry names must be unique")
        if any(not name or '/' in name for name in names):
            raise ValueError("Listing entry names must be non-empty and contain no '/'")

    @classmethod
    def from_entries(cls, entries: Iterable[ListingEntry]) -> 'Listing':
        """Build a sorted listing; a name seen as a directory stays a directory"""
        merged: Dict[str, ListingEntry] = {}
        for entry in entries:
            existing = merged.get(entry.name)
            if existing is None or (entry.is_directory and not existing.is_directory):
                merged[entry.name] = entry
        return cls(tuple(merged[name] for name in sorted(merged)))

    @property
    def names(self) -> List[str]:
        return [entry.name for entry in self.entries]


def remaining(deadline: float) -> float:
    """Seconds left until a monotonic deadline"""
    return deadline - time.monotonic()


def _http_date(value: Optional[str]) -> Optional[float]:
    if not value:
        return None
    try:
        return parsedate_to_datetime(value).timestamp()
    except (TypeError, ValueError):
        return None


def _content_length(value: Optional[str]) -> Optional[int]:
    try:
        return int(value) if value is not None else None
    except ValueError:
        return None


class Endpoint(ABC):
    """One attached storage backend"""

    kind: EndpointKind

    def __init__(self, config: EndpointConfig):
        self.config = config
        self._status = EndpointStatus.UNKNOWN
        self._last_poll: Optional[float] = None
        self._lock = threading.Lock()
        self._requests: Counter = Counter()
        self._timeouts = 0

    @property
    def id(self) -> str:
        return self.config.id

    @property
    def status(self) -> EndpointStatus:
        return self._status

    @property
    def last_poll(self) -> Optional[float]:
        return self._last_poll

    def publish_status(self, status: EndpointStatus, polled_at: float) -> None:
        """Only the health poller calls this"""
        with self._lock:
            self._status = status
            self._last_poll = polled_at

    @property
    def eligible(self) -> bool:
        """Unknown counts as eligible until the first poll completes"""
        return self._status is not EndpointStatus.OFFLINE

    def request_counts(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._requests)

    @property
    def timeouts(self) -> int:
        return self._timeouts

    def record_timeout(self) -> None:
        with self._lock:
            self._timeouts += 1

    def _request(self, op: str, method: str, url: str, deadline: float, **kwargs) -> requests.Response:
        """Issue one HTTP request that may not outlive ``deadline``"""
        left = remaining(deadline)
        if left <= 0:
            raise EndpointTimeout(self.id, f"deadline passed before {op}")
        with self._lock:
            self._requests[op] += 1
        try:
            return requests.request(method, url, timeout=(left, left), allow_redirects=False, **kwargs)
        except requests.Timeout:
            raise EndpointTimeout(self.id, f"{op} timed out after {left:.2f}s")
        except requests.RequestException as e:
            raise EndpointTransportError(self.id, f"{op} failed: {str(e)}")

    def _unexpected(self, op: str, response: requests.Response) -> EndpointTransportError:
        return EndpointTransportError(self.id, f"{op} returned HTTP {response.status_code}")

    @abstractmethod
    def stat(self, backend_path: str, deadline: float) -> StatResult:
        """Existence and metadata of ``backend_path``"""

    @abstractmethod
    def list(self, backend_path: str, deadline: float) -> Listing:
        """Immediate children of the directory ``backend_path``"""

    @abstractmethod
    def probe(self, deadline: float) -> bool:
        """True iff the endpoint answers a cheap request before the deadline"""

    @abstractmethod
    def redirect_url(self, backend_path: str, method: str, expiry: float,
                     now: Optional[datetime.datetime] = None) -> str:
        """URL the client is sent to for ``method`` on ``backend_path``"""


class WebDAVEndpoint(Endpoint):
    """Plain HTTP/WebDAV storage: HEAD, PROPFIND Depth:1, OPTIONS"""

    kind = EndpointKind.WEBDAV

    def url_for(self, backend_path: str) -> str:
        return self.config.base_url + urllib.parse.quote(backend_path, safe='/-_.~')

    def stat(self, backend_path, deadline):
        response = self._request('stat', 'HEAD', self.url_for(backend_path), deadline)
        if response.status_code == 404:
            return StatResult.missing()
        if response.status_code != 200:
            raise self._unexpected('stat', response)
        content_type = response.headers.get('Content-Type', '')
        if content_type.split(';')[0].strip() == DIRECTORY_CONTENT_TYPE:
            return StatResult(exists=True, is_directory=True,
                              modified=_http_date(response.headers.get('Last-Modified')))
        return StatResult(
            exists=True,
            size=_content_length(response.headers.get('Content-Length')),
            modified=_http_date(response.headers.get('Last-Modified')),
        )

    def list(self, backend_path, deadline):
        response = self._request(
            'list', 'PROPFIND', self.url_for(backend_path), deadline,
            data=PROPFIND_BODY,
            headers={'Depth': '1', 'Content-Type': 'application/xml; charset=utf-8'},
        )
        if response.status_code == 404:
            raise EndpointNotFound(self.id, f"{backend_path} does not exist")
        if response.status_code != 207:
            raise self._unexpected('list', response)
        return self._parse_multistatus(backend_path, response.content)

    def _parse_multistatus(self, backend_path: str, body: bytes) -> Listing:
        try:
            root = etree.fromstring(body)
        except etree.XMLSyntaxError as e:
            raise EndpointTransportError(self.id, f"malformed multistatus: {str(e)}")
        base_path = urllib.parse.urlsplit(self.config.base_url).path.rstrip('/')
        own_path = (base_path + backend_path).rstrip('/') or '/'

        entries = []
        self_is_directory = None
        for response in root.iter(f'{{{DAV_NS}}}response'):
            href = response.findtext(f'{{{DAV_NS}}}href') or ''
            href_path = urllib.parse.unquote(urllib.parse.urlsplit(href).path).rstrip('/') or '/'
            is_directory = response.find(f'.//{{{DAV_NS}}}resourcetype/{{{DAV_NS}}}collection') is not None
            if href_path == own_path:
                self_is_directory = is_directory
                continue
            size = None if is_directory else _content_length(
                response.findtext(f'.//{{{DAV_NS}}}getcontentlength'))
            entries.append(ListingEntry(href_path.rsplit('/', 1)[-1], is_directory, size))
        if self_is_directory is False:
            raise EndpointNotADirectory(self.id, f"{backend_path} is not a directory")
        return Listing.from_entries(entries)

    def probe(self, deadline):
        try:
            response = self._request('probe', 'OPTIONS', self.config.base_url + '/', deadline)
        except EndpointError as e:
            logger.debug(f"Probe of {self.id} failed: {str(e)}")
            return False
        return response.status_code < 500

    def redirect_url(self, backend_path, method, expiry, now=None):
        return self.url_for(backend_path)


class S3Endpoint(Endpoint):
    """S3-compatible object store with path-style addressing"""

    kind = EndpointKind.S3

    def __init__(self, config: EndpointConfig):
        super().__init__(config)
        parts = urllib.parse.urlsplit(config.base_url)
        self.scheme = parts.scheme
        self.host = parts.netloc
        self.base_path = parts.path.rstrip('/')
        self.bucket = config.s3_bucket

    @property
    def signing_key(self) -> SigningKey:
        return SigningKey(self.config.s3_access_key or '', self.config.s3_secret_key or '',
                          self.config.s3_region or '')

    @staticmethod
    def object_key(backend_path: str) -> str:
        return backend_path.lstrip('/')

    def _sign(self, method: str, path: str, expiry: int, now: Optional[datetime.datetime] = None,
              query: Tuple[Tuple[str, str], ...] = ()) -> str:
        return presign(self.signing_key, PresignRequest(
            method=method,
            host=self.host,
            canonical_path=self.base_path + path,
            expiry=expiry,
            signing_time=now or datetime.datetime.now(datetime.timezone.utc),
            query=query,
            scheme=self.scheme,
        ))

    def _object_path(self, backend_path: str) -> str:
        return f"/{self.bucket}/{self.object_key(backend_path)}"

    def stat(self, backend_path, deadline):
        key = self.object_key(backend_path)
        if key:
            url = self._sign('HEAD', self._object_path(backend_path), REQUEST_SIGNATURE_EXPIRY)
            response = self._request('stat', 'HEAD', url, deadline)
            if response.status_code == 200:
                return StatResult(
                    exists=True,
                    size=_content_length(response.headers.get('Content-Length')),
                    modified=_http_date(response.headers.get('Last-Modified')),
                )
            if response.status_code != 404:
                raise self._unexpected('stat', response)
        # a directory exists iff some key has it as a proper prefix
        keys, prefixes, _ = self._list_page(key + '/' if key else '', deadline, max_keys=1)
        if keys or prefixes or not key:
            return StatResult(exists=True, is_directory=True)
        return StatResult.missing()

    def _list_page(self, prefix: str, deadline: float, max_keys: int = 1000,
                   token: Optional[str] = None) -> Tuple[List[Tuple[str, Optional[int]]], List[str], Optional[str]]:
        query = [('delimiter', '/'), ('list-type', '2'), ('max-keys', str(max_keys)), ('prefix', prefix)]
        if token:
            query.append(('continuation-token', token))
        url = self._sign('GET', f"/{self.bucket}", REQUEST_SIGNATURE_EXPIRY, query=tuple(query))
        response = self._request('list', 'GET', url, deadline)
        if response.status_code != 200:
            raise self._unexpected('list', response)
        try:
            root = etree.fromstring(response.content)
        except etree.XMLSyntaxError as e:
            raise EndpointTransportError(self.id, f"malformed listing: {str(e)}")
        ns = {'s3': S3_NS}
        keys = [
            (item.findtext('s3:Key', namespaces=ns), _content_length(item.findtext('s3:Size', namespaces=ns)))
            for item in root.findall('s3:Contents', ns)
        ]
        prefixes = [item.findtext('s3:Prefix', namespaces=ns) for item in root.findall('s3:CommonPrefixes', ns)]
        truncated = (root.findtext('s3:IsTruncated', namespaces=ns) or '').lower() == 'true'
        next_token = root.findtext('s3:NextContinuationToken', namespaces=ns) if truncated else None
        return keys, prefixes, next_token

    def list(self, backend_path, deadline):
        key = self.object_key(backend_path)
        prefix = key + '/' if key else ''
        entries = []
        token = None
        while True:
            keys, prefixes, token = self._list_page(prefix, deadline, token=token)
            for name, size in keys:
                child = name[len(prefix):]
                if child:
                    entries.append(ListingEntry(child, False, size))
            for common in prefixes:
                child = common[len(prefix):].rstrip('/')
                if child:
                    entries.append(ListingEntry(child, True))
            if not token:
                break
        if not entries and key:
            if self.stat(backend_path, deadline).exists:
                raise EndpointNotADirectory(self.id, f"{backend_path} is not a directory")
            raise EndpointNotFound(self.id, f"{backend_path} does not exist")
        return Listing.from_entries(entries)

    def probe(self, deadline):
        try:
            url = self._sign('HEAD', f"/{self.bucket}", REQUEST_SIGNATURE_EXPIRY)
            response = self._request('probe', 'HEAD', url, deadline)
        except (EndpointError, SigningError) as e:
            logger.debug(f"Probe of {self.id} failed: {str(e)}")
            return False
        return response.status_code == 200

    def redirect_url(self, backend_path, method, expiry, now=None):
        seconds = math.ceil(expiry) if expiry > 0 else 0
        if seconds <= 0:
            raise SigningError(f"Expiry must be positive, got {expiry}")
        return self._sign(method, self._object_path(backend_path), seconds, now=now)


ENDPOINT_TYPES: Dict[EndpointKind, Type[Endpoint]] = {
    EndpointKind.WEBDAV: WebDAVEndpoint,
    EndpointKind.S3: S3Endpoint,
}


def build_endpoint(config: EndpointConfig) -> Endpoint:
    """Instantiate the client class registered for the endpoint's kind"""
    try:
        endpoint_type = ENDPOINT_TYPES[config.kind]
    except KeyError:
        raise ValueError(f"No endpoint implementation for kind {config.kind!r}")
    return endpoint_type(config)
