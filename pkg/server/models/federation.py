"""
Wiring of one gateway instance: endpoints, caches, locator, health poller.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

from server.config import FederationConfig
from server.models.authz import MembershipRegistry
from server.models.cache import LocalCache, SharedCache, build_shared_cache
from server.models.endpoints import Endpoint, build_endpoint
from server.models.geo import GeoDatabase, GeoPoint, rank
from server.models.health import HealthMonitor
from server.models.locator import Locator, ReplicaLocation, translate
from server.models.metrics import GatewayMetrics

logger = logging.getLogger(__name__)


class FederationService:
    """Everything a request handler needs, built once from a FederationConfig"""

    def __init__(self, config: FederationConfig, shared_cache: Optional[SharedCache] = None,
                 geo: Optional[GeoDatabase] = None, registry: Optional[MembershipRegistry] = None):
        self.config = config
        self.metrics = GatewayMetrics()
        self.endpoints: Dict[str, Endpoint] = {c.id: build_endpoint(c) for c in config.endpoints}
        self.metrics.watch_endpoints(self.endpoints.values())
        if geo is None:
            geo = GeoDatabase.load(config.geo_db_path) if config.geo_db_path else GeoDatabase()
        self.geo = geo
        self.registry = registry or MembershipRegistry.load(
            config.members_path, config.privileged_path, config.required_attribute_prefix)
        self.shared_cache = shared_cache if shared_cache is not None else build_shared_cache(config.l2)
        self.locator = Locator(config, self.endpoints, LocalCache(config.l1_max_entries),
                               self.shared_cache, self.metrics)
        self.health = HealthMonitor(self.endpoints.values(), config.probe_timeout,
                                    config.failure_threshold)

    def start(self) -> None:
        self.health.start(self.config.health_poll_interval)

    def close(self) -> None:
        self.health.close()
        self.locator.close()

    def rank_replicas(self, replicas: Sequence[ReplicaLocation],
                      client: Optional[GeoPoint]) -> List[ReplicaLocation]:
        """Eligible replicas, nearest first"""
        by_id = {r.endpoint_id: r for r in replicas if self.endpoints[r.endpoint_id].eligible}
        order = rank([(i, self.endpoints[i].config.location) for i in by_id], client) if by_id else []
        return [by_id[i] for i in order]

    def write_targets(self, path: str, client: Optional[GeoPoint]) -> List[Tuple[Endpoint, str]]:
        """Eligible writable endpoints covering ``path``, nearest first"""
        candidates = {}
        for endpoint in self.endpoints.values():
            backend_path = translate(path, endpoint.config)
            if backend_path is not None and endpoint.config.writable and endpoint.eligible:
                candidates[endpoint.id] = (endpoint, backend_path)
        if not candidates:
            return []
        order = rank([(i, self.endpoints[i].config.location) for i in candidates], client)
        return [candidates[i] for i in order]

    def render_metrics(self) -> bytes:
        return self.metrics.render()
