"""
Simulated storage endpoints for the test harness.

Each simulated endpoint is a small Flask app on an ephemeral loopback port
speaking either WebDAV or the S3 REST subset the gateway uses. Requests are
counted per operation before any injected latency or outage applies, so the
counters see exactly what the gateway sent.
"""

import datetime
import logging
import threading
import time
import urllib.parse
from collections import Counter
from email.utils import formatdate
from typing import Dict, Iterable, List, Optional, Tuple

from flask import Flask, Response, request
from lxml import etree

from server.app import GatewayServer
from server.config import EndpointKind, validate_prefix
from server.models.signer import SigningKey, verify

logger = logging.getLogger(__name__)

DAV_NS = 'DAV:'
S3_NS = 'http://s3.amazonaws.com/doc/2006-03-01/'
DIRECTORY_CONTENT_TYPE = 'httpd/unix-directory'

# operations the gateway itself issues; the rest come from redirected clients
QUERY_OPS = ('stat', 'list', 'probe')


class ObjectStore:
    """Thread-safe map of canonical backend path -> (bytes, mtime)"""

    def __init__(self, objects: Optional[Dict[str, bytes]] = None, clock=time.time):
        self._clock = clock
        self._lock = threading.Lock()
        self._objects: Dict[str, Tuple[bytes, float]] = {}
        for path, data in (objects or {}).items():
            self.put(path, data)

    def put(self, path: str, data: bytes) -> None:
        with self._lock:
            self._objects[validate_prefix(path)] = (bytes(data), self._clock())

    def get(self, path: str) -> Optional[Tuple[bytes, float]]:
        with self._lock:
            return self._objects.get(path)

    def delete(self, path: str) -> bool:
        with self._lock:
            return self._objects.pop(path, None) is not None

    def paths(self) -> List[str]:
        with self._lock:
            return sorted(self._objects)

    def is_directory(self, path: str) -> bool:
        """Directories are implicit: any proper prefix of an object path"""
        if path == '/':
            return True
        below = path + '/'
        with self._lock:
            return any(p.startswith(below) for p in self._objects)

    def children(self, path: str) -> List[Tuple[str, bool, Optional[int]]]:
        """(name, is_directory, size) of the immediate children of ``path``"""
        below = '/' if path == '/' else path + '/'
        found: Dict[str, Tuple[bool, Optional[int]]] = {}
        with self._lock:
            for p, (data, _) in self._objects.items():
                if not p.startswith(below):
                    continue
                name, _, rest = p[len(below):].partition('/')
                if rest:
                    found[name] = (True, None)
                elif name not in found:
                    found[name] = (False, len(data))
        return [(name, is_dir, size) for name, (is_dir, size) in sorted(found.items())]


def _http_date(timestamp: float) -> str:
    return formatdate(timestamp, usegmt=True)


class SimulatedEndpoint:
    """One fake storage backend with fault toggles and per-op counters"""

    def __init__(self, endpoint_id: str, kind: EndpointKind, objects: Optional[Dict[str, bytes]] = None,
                 latency: float = 0.0, down: bool = False, bucket: str = 'federation',
                 access_key: Optional[str] = None, secret_key: Optional[str] = None,
                 region: str = 'us-east-1', page_size: int = 1000):
        self.id = endpoint_id
        self.kind = EndpointKind(kind)
        self.store = ObjectStore(objects)
        self.bucket = bucket
        self.region = region
        self.access_key = access_key or f'AK{endpoint_id.upper()}SIM'
        self.secret_key = secret_key or f'{endpoint_id}-simulated-secret'
        self.page_size = page_size
        self._latency = latency
        self._down = down
        self._lock = threading.Lock()
        self._counters: Counter = Counter()
        self._rejected = 0
        # set on stop so injected latency never outlives the listener
        self._stopping = threading.Event()
        self._server: Optional[GatewayServer] = None
        self.app = self._build_app()

    # lifecycle

    def start(self) -> None:
        if self._server is not None:
            return
        self._stopping.clear()
        self._server = GatewayServer(self.app, '127.0.0.1', 0)
        self._server.start()
        logger.debug(f"Simulated {self.kind.value} endpoint {self.id} listening on {self.base_url}")

    def stop(self) -> None:
        if self._server is None:
            return
        self._stopping.set()
        self._server.stop()
        self._server = None

    @property
    def running(self) -> bool:
        return self._server is not None

    @property
    def base_url(self) -> str:
        if self._server is None:
            raise RuntimeError(f"Simulated endpoint {self.id} is not running")
        return self._server.url

    # fault injection

    def set_latency(self, seconds: float) -> None:
        self._latency = max(0.0, seconds)

    def set_down(self, down: bool) -> None:
        self._down = bool(down)

    @property
    def down(self) -> bool:
        return self._down

    # counters

    def counters(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._counters)

    def queries(self, ops: Iterable[str] = QUERY_OPS) -> int:
        counts = self.counters()
        return sum(counts.get(op, 0) for op in ops)

    @property
    def rejected_signatures(self) -> int:
        return self._rejected

    def reset_counters(self) -> None:
        with self._lock:
            self._counters.clear()
            self._rejected = 0

    @property
    def signing_key(self) -> SigningKey:
        return SigningKey(self.access_key, self.secret_key, self.region)

    def endpoint_document(self, location, federated_prefix: str = '/', backend_prefix: str = '/',
                          writable: bool = True) -> Dict[str, object]:
        """The ``endpoints`` entry a gateway config needs to reach this endpoint"""
        document = {
            'id': self.id,
            'kind': self.kind.value,
            'base_url': self.base_url,
            'federated_prefix': federated_prefix,
            'backend_prefix': backend_prefix,
            'location': {'lat': location.lat, 'lon': location.lon},
            'writable': writable,
        }
        if self.kind is EndpointKind.S3:
            document.update({
                's3_access_key': self.access_key,
                's3_secret_key': self.secret_key,
                's3_region': self.region,
                's3_bucket': self.bucket,
            })
        return document

    # request plumbing

    def _admit(self, op: str) -> Optional[Response]:
        with self._lock:
            self._counters[op] += 1
        if self._latency > 0:
            self._stopping.wait(self._latency)
        if self._down or self._stopping.is_set():
            return Response('endpoint down', status=503)
        return None

    def _build_app(self) -> Flask:
        app = Flask(__name__, static_folder=None)
        app.url_map.merge_slashes = False
        if self.kind is EndpointKind.S3:
            view = self._s3_view
            methods = ['GET', 'HEAD', 'PUT', 'DELETE']
        else:
            view = self._webdav_view
            methods = ['GET', 'HEAD', 'PUT', 'DELETE', 'PROPFIND', 'OPTIONS']
        app.add_url_rule('/', 'resource', view, defaults={'subpath': ''}, methods=methods)
        app.add_url_rule('/<path:subpath>', 'resource', view, methods=methods)
        return app

    @staticmethod
    def _request_path() -> str:
        return validate_prefix(request.path)

    # WebDAV

    _WEBDAV_OPS = {'HEAD': 'stat', 'PROPFIND': 'list', 'OPTIONS': 'probe',
                   'GET': 'get', 'PUT': 'put', 'DELETE': 'delete'}

    def _webdav_view(self, subpath):
        refused = self._admit(self._WEBDAV_OPS[request.method])
        if refused is not None:
            return refused
        path = self._request_path()

        if request.method == 'OPTIONS':
            return Response(status=200, headers={'DAV': '1', 'Allow': ', '.join(self._WEBDAV_OPS)})
        if request.method == 'PUT':
            self.store.put(path, request.get_data())
            return Response(status=201)
        if request.method == 'DELETE':
            return Response(status=204 if self.store.delete(path) else 404)

        item = self.store.get(path)
        if request.method == 'PROPFIND':
            if item is not None:
                return self._multistatus([(path, False, len(item[0]), item[1])])
            if not self.store.is_directory(path):
                return Response(status=404)
            resources = [(path, True, None, None)]
            if request.headers.get('Depth', 'infinity') != '0':
                resources.extend(
                    ('/' + name if path == '/' else f'{path}/{name}', is_dir, size, None)
                    for name, is_dir, size in self.store.children(path)
                )
            return self._multistatus(resources)

        if item is not None:
            data, modified = item
            return Response(data, status=200, content_type='application/octet-stream',
                            headers={'Last-Modified': _http_date(modified)})
        if request.method == 'HEAD' and self.store.is_directory(path):
            return Response(b'', status=200, content_type=DIRECTORY_CONTENT_TYPE)
        return Response(status=404)

    @staticmethod
    def _multistatus(resources) -> Response:
        root = etree.Element(f'{{{DAV_NS}}}multistatus', nsmap={'D': DAV_NS})
        for path, is_directory, size, modified in resources:
            response = etree.SubElement(root, f'{{{DAV_NS}}}response')
            href = urllib.parse.quote(path, safe='/-_.~')
            if is_directory and not href.endswith('/'):
                href += '/'
            etree.SubElement(response, f'{{{DAV_NS}}}href').text = href
            propstat = etree.SubElement(response, f'{{{DAV_NS}}}propstat')
            prop = etree.SubElement(propstat, f'{{{DAV_NS}}}prop')
            resourcetype = etree.SubElement(prop, f'{{{DAV_NS}}}resourcetype')
            if is_directory:
                etree.SubElement(resourcetype, f'{{{DAV_NS}}}collection')
            else:
                etree.SubElement(prop, f'{{{DAV_NS}}}getcontentlength').text = str(size)
            if modified is not None:
                etree.SubElement(prop, f'{{{DAV_NS}}}getlastmodified').text = _http_date(modified)
            etree.SubElement(propstat, f'{{{DAV_NS}}}status').text = 'HTTP/1.1 200 OK'
        body = etree.tostring(root, xml_declaration=True, encoding='utf-8')
        return Response(body, status=207, content_type='text/xml; charset="utf-8"')

    # S3

    def _s3_op(self, key: str) -> str:
        if request.method == 'HEAD':
            return 'stat' if key else 'probe'
        if request.method == 'GET':
            return 'list' if not key else 'get'
        return request.method.lower()

    def _signed(self) -> bool:
        raw_uri = request.environ.get('RAW_URI') or request.environ.get('REQUEST_URI')
        if not raw_uri:
            query = request.environ.get('QUERY_STRING', '')
            raw_uri = request.environ.get('PATH_INFO', '/') + (f'?{query}' if query else '')
        url = f"http://{request.host}{raw_uri}"
        return verify(self.signing_key, url, datetime.datetime.now(datetime.timezone.utc),
                      method=request.method)

    @staticmethod
    def _s3_error(code: str, status: int) -> Response:
        root = etree.Element('Error')
        etree.SubElement(root, 'Code').text = code
        body = b'' if request.method == 'HEAD' else etree.tostring(root, xml_declaration=True,
                                                                     encoding='utf-8')
        return Response(body, status=status, content_type='application/xml')

    def _s3_view(self, subpath):
        bucket, _, key = request.path.lstrip('/').partition('/')
        refused = self._admit(self._s3_op(key))
        if refused is not None:
            return refused
        if bucket != self.bucket:
            return self._s3_error('NoSuchBucket', 404)
        if not self._signed():
            with self._lock:
                self._rejected += 1
            return self._s3_error('SignatureDoesNotMatch', 403)

        if not key:
            if request.method == 'HEAD':
                return Response(status=200)
            if request.method == 'GET' and request.args.get('list-type') == '2':
                return self._list_objects()
            return self._s3_error('MethodNotAllowed', 405)

        path = validate_prefix('/' + key)
        if request.method == 'PUT':
            self.store.put(path, request.get_data())
            return Response(status=200)
        if request.method == 'DELETE':
            self.store.delete(path)
            return Response(status=204)
        item = self.store.get(path)
        if item is None:
            return self._s3_error('NoSuchKey', 404)
        data, modified = item
        return Response(data, status=200, content_type='application/octet-stream',
                        headers={'Last-Modified': _http_date(modified)})

    def _list_objects(self) -> Response:
        prefix = request.args.get('prefix', '')
        delimiter = request.args.get('delimiter', '')
        try:
            max_keys = min(int(request.args.get('max-keys', '1000')), self.page_size)
            start = int(request.args.get('continuation-token', '0'))
        except ValueError:
            return self._s3_error('InvalidArgument', 400)

        items: Dict[str, Optional[int]] = {}
        for path in self.store.paths():
            key = path.lstrip('/')
            if not key.startswith(prefix):
                continue
            rest = key[len(prefix):]
            if delimiter and delimiter in rest:
                items[prefix + rest.split(delimiter, 1)[0] + delimiter] = None
            else:
                item = self.store.get(path)
                if item is not None:
                    items[key] = len(item[0])
        ordered = sorted(items.items())
        page = ordered[start:start + max_keys]
        truncated = start + max_keys < len(ordered)

        root = etree.Element(f'{{{S3_NS}}}ListBucketResult', nsmap={None: S3_NS})
        etree.SubElement(root, f'{{{S3_NS}}}Name').text = self.bucket
        etree.SubElement(root, f'{{{S3_NS}}}Prefix').text = prefix
        etree.SubElement(root, f'{{{S3_NS}}}KeyCount').text = str(len(page))
        etree.SubElement(root, f'{{{S3_NS}}}MaxKeys').text = str(max_keys)
        etree.SubElement(root, f'{{{S3_NS}}}IsTruncated').text = 'true' if truncated else 'false'
        if truncated:
            etree.SubElement(root, f'{{{S3_NS}}}NextContinuationToken').text = str(start + max_keys)
        for key, size in page:
            if size is None:
                common = etree.SubElement(root, f'{{{S3_NS}}}CommonPrefixes')
                etree.SubElement(common, f'{{{S3_NS}}}Prefix').text = key
            else:
                contents = etree.SubElement(root, f'{{{S3_NS}}}Contents')
                etree.SubElement(contents, f'{{{S3_NS}}}Key').text = key
                etree.SubElement(contents, f'{{{S3_NS}}}Size').text = str(size)
        body = etree.tostring(root, xml_declaration=True, encoding='utf-8')
        return Response(body, status=200, content_type='application/xml')
