import os
import threading
import time
from collections import Counter
from typing import Dict, Optional
from unittest.mock import patch

import pytest

from harness.federation import default_scenario, launch
from server.app import create_app
from server.config import build_config
from server.models.authz import MembershipRegistry
from server.models.cache import InProcessSharedCache
from server.models.endpoints import (
    Endpoint, EndpointNotADirectory, EndpointNotFound, Listing, ListingEntry, StatResult,
)
from server.models.federation import FederationService
from server.models.geo import GeoDatabase, GeoPoint

FIXTURES = os.path.join(os.path.dirname(__file__), 'fixtures')

ADMIN = '/DC=org/DC=fedgate/OU=Robots/CN=production-admin'
ALICE = '/DC=org/DC=fedgate/OU=Users/CN=alice'
MALLORY = '/DC=org/DC=elsewhere/OU=Users/CN=mallory'


class FakeEndpoint(Endpoint):
    """In-memory endpoint: backend path -> bytes, with an optional delay"""

    def __init__(self, config, objects: Optional[Dict[str, bytes]] = None, delay: float = 0.0):
        super().__init__(config)
        self.kind = config.kind
        self.objects = dict(objects or {})
        self.delay = delay
        self.healthy = True
        self.calls: Counter = Counter()
        self.release = threading.Event()

    def _enter(self, op):
        with self._lock:
            self.calls[op] += 1
            self._requests[op] += 1
        if self.delay:
            self.release.wait(self.delay)

    def _is_directory(self, path):
        below = '/' if path == '/' else path + '/'
        return path == '/' or any(p.startswith(below) for p in self.objects)

    def stat(self, backend_path, deadline):
        self._enter('stat')
        if backend_path in self.objects:
            return StatResult(exists=True, size=len(self.objects[backend_path]), modified=1700000000.0)
        if self._is_directory(backend_path):
            return StatResult(exists=True, is_directory=True)
        return StatResult.missing()

    def list(self, backend_path, deadline):
        self._enter('list')
        if backend_path in self.objects:
            raise EndpointNotADirectory(self.id, backend_path)
        if not self._is_directory(backend_path):
            raise EndpointNotFound(self.id, backend_path)
        below = '/' if backend_path == '/' else backend_path + '/'
        entries = []
        for path, data in self.objects.items():
            if path.startswith(below):
                name, _, rest = path[len(below):].partition('/')
                entries.append(ListingEntry(name, bool(rest), None if rest else len(data)))
        return Listing.from_entries(entries)

    def probe(self, deadline):
        self._enter('probe')
        return self.healthy

    def redirect_url(self, backend_path, method, expiry, now=None):
        return f"{self.config.base_url}{backend_path}?method={method}"


def endpoint_document(endpoint_id, lat, lon, federated_prefix='/', backend_prefix='/', writable=True):
    return {
        'id': endpoint_id,
        'kind': 'webdav',
        'base_url': f'http://{endpoint_id}.example',
        'federated_prefix': federated_prefix,
        'backend_prefix': backend_prefix,
        'location': {'lat': lat, 'lon': lon},
        'writable': writable,
    }


def make_config(endpoints=None, **sections):
    document = {
        'federation': {'insecure_header_auth': True, 'trust_forwarded_for': True, 'fanout_timeout': 1.0},
        'endpoints': endpoints or [
            endpoint_document('cern', 46.23, 6.05),
            endpoint_document('triumf', 49.25, -123.23),
            endpoint_document('uvic', 48.46, -123.31),
        ],
    }
    for name, values in sections.items():
        document.setdefault(name, {}).update(values)
    return build_config(document, FIXTURES)


def make_federation(config, objects=None, delays=None, shared_cache=None):
    """FederationService whose endpoints are FakeEndpoints"""
    objects = objects or {}
    delays = delays or {}

    def fake(endpoint_config):
        return FakeEndpoint(endpoint_config, objects.get(endpoint_config.id),
                            delays.get(endpoint_config.id, 0.0))

    registry = MembershipRegistry(members=frozenset([ALICE]), privileged=frozenset([ADMIN]))
    geo = GeoDatabase.load(os.path.join(FIXTURES, 'geo.csv'))
    with patch('server.models.federation.build_endpoint', side_effect=fake):
        if shared_cache is None:
            shared_cache = InProcessSharedCache()
        return FederationService(config, shared_cache=shared_cache,
                                 geo=geo, registry=registry)


SAMPLE_OBJECTS = {
    'cern': {'/data/run1.root': b'x' * 100, '/data/cern-only.root': b'c' * 7},
    'triumf': {'/data/run1.root': b'x' * 100, '/data/sub/deep.root': b'd' * 3},
    'uvic': {'/data/run1.root': b'x' * 100},
}


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def federation():
    """FederationService over three fake endpoints"""
    service = make_federation(make_config(), SAMPLE_OBJECTS)
    yield service
    service.close()


@pytest.fixture
def app(federation):
    """Create and configure a test app"""
    return create_app(config_name='testing', federation=federation)


@pytest.fixture
def client(app):
    """Create a test client"""
    return app.test_client()


def identity_headers(subject=ALICE, ip='192.0.2.10', attributes=None):
    headers = {'X-Forwarded-For': ip}
    if subject:
        headers['X-Fed-Subject'] = subject
    if attributes:
        headers['X-Fed-Attributes'] = ','.join(attributes)
    return headers


SCENARIO_OBJECTS = {
    site: {'/data/run1.root': f'{site} replica of run1'.encode()}
    for site in ('cern', 'triumf', 'uvic')
}


@pytest.fixture
def harness():
    """Three simulated sites, each holding /data/run1.root"""
    handle = launch(default_scenario(SCENARIO_OBJECTS))
    handle.poll_now()
    yield handle
    handle.teardown()


def wait_until(predicate, timeout=5.0, interval=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


GENEVA = GeoPoint(46.20, 6.14)
