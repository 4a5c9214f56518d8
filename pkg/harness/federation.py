"""
Federation-in-a-box: simulated endpoints, generated fixtures and one or more
gateway instances, launched together and torn down together.
"""

import dataclasses
import logging
import os
import shutil
import tempfile
import threading
import time
import urllib.parse
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import yaml

from client.client import FederationClient
from server.app import GatewayServer, StartupError, create_app
from server.config import (
    EndpointKind, FederationConfig, join_path, load_config, path_within, validate_config,
    validate_prefix,
)
from server.models.cache import InProcessSharedCache, SharedCache
from server.models.federation import FederationService
from server.models.geo import GeoPoint
from harness.simulated import SimulatedEndpoint

logger = logging.getLogger(__name__)

ADMIN_SUBJECT = '/DC=org/DC=fedgate/OU=Robots/CN=production-admin'
MEMBER_SUBJECT = '/DC=org/DC=fedgate/OU=Users/CN=alice'
ATTRIBUTE_SUBJECT = '/DC=org/DC=fedgate/OU=Users/CN=bob'
OUTSIDER_SUBJECT = '/DC=org/DC=elsewhere/OU=Users/CN=mallory'

# harness defaults: fast polling so status changes land within a test's patience
DEFAULT_KNOBS = {
    'health_poll_interval': 0.2,
    'probe_timeout': 0.5,
    'failure_threshold': 1,
    'fanout_timeout': 1.0,
}


@dataclass
class EndpointSpec:
    id: str
    kind: EndpointKind
    location: GeoPoint
    latency: float = 0.0
    initially_down: bool = False
    # federated path -> content; must lie under federated_prefix
    objects: Dict[str, bytes] = field(default_factory=dict)
    federated_prefix: str = '/'
    backend_prefix: str = '/'
    writable: bool = True


@dataclass
class ClientSpec:
    ip: str
    location: GeoPoint
    cidr: Optional[str] = None


@dataclass
class ScenarioSpec:
    endpoints: List[EndpointSpec]
    clients: List[ClientSpec] = field(default_factory=list)
    knobs: Dict[str, Any] = field(default_factory=dict)
    # alias -> (subject, attributes); the alias is what scenario scripts name
    identities: Dict[str, Tuple[Optional[str], Tuple[str, ...]]] = field(default_factory=lambda: {
        'admin': (ADMIN_SUBJECT, ()),
        'member': (MEMBER_SUBJECT, ()),
        'attribute': (ATTRIBUTE_SUBJECT, ('/atlas/Role=production',)),
        'outsider': (OUTSIDER_SUBJECT, ()),
        'anonymous': (None, ()),
    })
    members: List[str] = field(default_factory=lambda: [MEMBER_SUBJECT])
    privileged: List[str] = field(default_factory=lambda: [ADMIN_SUBJECT])

    def validate(self) -> None:
        ids = [endpoint.id for endpoint in self.endpoints]
        if not ids or len(ids) != len(set(ids)):
            raise ValueError("A scenario needs at least one endpoint and unique endpoint ids")
        for endpoint in self.endpoints:
            prefix = validate_prefix(endpoint.federated_prefix)
            for path in endpoint.objects:
                if validate_prefix(path) != path:
                    raise ValueError(f"Object path {path!r} on {endpoint.id} is not normalized")
                if not path_within(path, prefix):
                    raise ValueError(f"Object path {path} lies outside {endpoint.id}'s prefix {prefix}")


# three sites, each with one client network next to it
SITES = {
    'cern': GeoPoint(46.23, 6.05),
    'triumf': GeoPoint(49.25, -123.23),
    'uvic': GeoPoint(48.46, -123.31),
}
CLIENTS = {
    'geneva': ClientSpec('192.0.2.10', GeoPoint(46.20, 6.14), '192.0.2.0/24'),
    'vancouver': ClientSpec('198.51.100.10', GeoPoint(49.28, -123.12), '198.51.100.0/24'),
    'victoria': ClientSpec('203.0.113.10', GeoPoint(48.43, -123.37), '203.0.113.0/24'),
}


def default_scenario(objects: Optional[Dict[str, Dict[str, bytes]]] = None,
                     **knobs) -> ScenarioSpec:
    """CERN and UVic as S3 stores, TRIUMF as WebDAV, a client next to each"""
    objects = objects or {}
    kinds = {'cern': EndpointKind.S3, 'triumf': EndpointKind.WEBDAV, 'uvic': EndpointKind.S3}
    return ScenarioSpec(
        endpoints=[
            EndpointSpec(site, kinds[site], location, objects=dict(objects.get(site, {})))
            for site, location in SITES.items()
        ],
        clients=list(CLIENTS.values()),
        knobs=knobs,
    )


def _backend_path(spec: EndpointSpec, path: str) -> str:
    prefix = validate_prefix(spec.federated_prefix)
    remainder = path if prefix == '/' else path[len(prefix):]
    return join_path(validate_prefix(spec.backend_prefix), remainder)


class FederationHandle:
    """A running federation: fault toggles, counters and gateway clients"""

    def __init__(self, spec: ScenarioSpec, workdir: str, owns_workdir: bool,
                 simulators: Dict[str, SimulatedEndpoint], config: FederationConfig,
                 shared_cache: SharedCache):
        self.spec = spec
        self.workdir = workdir
        self.simulators = simulators
        self.config = config
        self.shared_cache = shared_cache
        self.gateways: List[Tuple[GatewayServer, FederationService]] = []
        self._owns_workdir = owns_workdir
        self._closed = False
        self._lock = threading.Lock()

    # gateways

    def start_gateway(self) -> Tuple[GatewayServer, FederationService]:
        """Another gateway instance on the same config, sharing the L2 cache"""
        federation = FederationService(self.config, shared_cache=self.shared_cache)
        app = create_app(config_name='testing', federation=federation)
        try:
            server = GatewayServer(app, '127.0.0.1', 0)
        except StartupError:
            federation.close()
            raise
        federation.start()
        server.start()
        with self._lock:
            self.gateways.append((server, federation))
        return server, federation

    @property
    def url(self) -> str:
        return self.gateways[0][0].url

    @property
    def federation(self) -> FederationService:
        return self.gateways[0][1]

    def client(self, ip: Optional[str] = None, identity: str = 'member',
               gateway: int = 0) -> FederationClient:
        subject, attributes = self.spec.identities[identity]
        return FederationClient(self.gateways[gateway][0].url, subject=subject,
                                attributes=attributes, forwarded_for=ip)

    # fault injection

    def set_latency(self, endpoint_id: str, seconds: float) -> None:
        self.simulators[endpoint_id].set_latency(seconds)

    def set_down(self, endpoint_id: str, down: bool = True) -> None:
        self.simulators[endpoint_id].set_down(down)

    def poll_now(self) -> None:
        """One synchronous health cycle on every gateway"""
        for _, federation in self.gateways:
            federation.health.poll_once()

    def wait_for_poll(self, cycles: int = 1, timeout: float = 10.0) -> None:
        """Block until ``cycles`` full background poll cycles began after this call"""
        targets = [(federation, federation.health.cycles + cycles + 1) for _, federation in self.gateways]
        deadline = time.monotonic() + timeout
        for federation, target in targets:
            while federation.health.cycles < target:
                if time.monotonic() > deadline:
                    raise TimeoutError(f"Health poller did not complete {cycles} cycles in {timeout}s")
                time.sleep(0.01)

    # counters

    def counters(self) -> Dict[str, Dict[str, int]]:
        return {endpoint_id: sim.counters() for endpoint_id, sim in self.simulators.items()}

    def queries(self, endpoint_id: Optional[str] = None, ops=('stat', 'list')) -> int:
        """Resolution traffic received by one endpoint, or all of them"""
        sims = [self.simulators[endpoint_id]] if endpoint_id else self.simulators.values()
        return sum(sim.queries(ops) for sim in sims)

    def reset_counters(self) -> None:
        for sim in self.simulators.values():
            sim.reset_counters()

    def endpoint_for_url(self, url: Optional[str]) -> Optional[str]:
        """Simulated endpoint id a redirect Location points at"""
        if not url:
            return None
        netloc = urllib.parse.urlsplit(url).netloc
        for endpoint_id, sim in self.simulators.items():
            if sim.running and urllib.parse.urlsplit(sim.base_url).netloc == netloc:
                return endpoint_id
        return None

    # lifecycle

    def teardown(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            gateways, self.gateways = self.gateways, []
        for server, federation in gateways:
            server.stop()
            federation.close()
        for sim in self.simulators.values():
            sim.stop()
        self.shared_cache.close()
        if self._owns_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.teardown()


def _write_fixtures(spec: ScenarioSpec, simulators: Dict[str, SimulatedEndpoint], workdir: str) -> str:
    with open(os.path.join(workdir, 'geo.csv'), 'w', encoding='utf-8') as f:
        f.write('# cidr,lat,lon\n')
        for client in spec.clients:
            cidr = client.cidr or client.ip
            f.write(f'{cidr},{client.location.lat},{client.location.lon}\n')
    with open(os.path.join(workdir, 'members.txt'), 'w', encoding='utf-8') as f:
        f.write('\n'.join(spec.members) + '\n')
    with open(os.path.join(workdir, 'privileged.txt'), 'w', encoding='utf-8') as f:
        f.write('\n'.join(spec.privileged) + '\n')

    document = {
        'federation': {
            'listen_address': '127.0.0.1:0',
            'insecure_header_auth': True,
            'trust_forwarded_for': True,
        },
        'auth': {'members_path': 'members.txt', 'privileged_path': 'privileged.txt'},
        'geo': {'db_path': 'geo.csv'},
        'endpoints': [
            simulators[endpoint.id].endpoint_document(
                endpoint.location, endpoint.federated_prefix, endpoint.backend_prefix, endpoint.writable)
            for endpoint in spec.endpoints
        ],
    }
    path = os.path.join(workdir, 'fedgate.yaml')
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(document, f, sort_keys=False)
    return path


def launch(spec: ScenarioSpec, workdir: Optional[str] = None,
           shared_cache: Optional[SharedCache] = None, gateways: int = 1) -> FederationHandle:
    """Start simulated endpoints and ``gateways`` gateway instances for ``spec``"""
    spec.validate()
    owns_workdir = workdir is None
    workdir = workdir or tempfile.mkdtemp(prefix='fedgate-harness-')
    simulators: Dict[str, SimulatedEndpoint] = {}
    handle = None
    try:
        for endpoint in spec.endpoints:
            sim = SimulatedEndpoint(
                endpoint.id, endpoint.kind,
                objects={_backend_path(endpoint, p): data for p, data in endpoint.objects.items()},
                latency=endpoint.latency, down=endpoint.initially_down,
            )
            simulators[endpoint.id] = sim
            sim.start()

        config = load_config(_write_fixtures(spec, simulators, workdir))
        config = dataclasses.replace(config, **{**DEFAULT_KNOBS, **spec.knobs})
        validate_config(config)

        handle = FederationHandle(spec, workdir, owns_workdir, simulators, config,
                                  shared_cache if shared_cache is not None else InProcessSharedCache())
        for _ in range(gateways):
            handle.start_gateway()
    except Exception as e:
        logger.error(f"Federation launch failed: {str(e)}")
        if handle is not None:
            handle.teardown()
        else:
            for sim in simulators.values():
                sim.stop()
            if owns_workdir:
                shutil.rmtree(workdir, ignore_errors=True)
        raise StartupError(f"Federation launch failed: {str(e)}") from e
    logger.info(f"Launched federation of {len(simulators)} endpoints at {handle.url}")
    return handle
