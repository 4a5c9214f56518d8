"""
Gateway counters on a per-instance prometheus_client registry.
"""

from typing import Iterable, Optional

from prometheus_client import (
    CONTENT_TYPE_LATEST, CollectorRegistry, Counter, disable_created_metrics, generate_latest,
)
from prometheus_client.core import CounterMetricFamily, GaugeMetricFamily
from prometheus_client.registry import Collector

from server.models.endpoints import Endpoint, EndpointStatus

# no *_created samples
disable_created_metrics()


class EndpointCollector(Collector):
    """Reads request, timeout and status counters off the endpoints at scrape time"""

    def __init__(self, endpoints: Iterable[Endpoint]):
        self.endpoints = list(endpoints)

    def collect(self):
        requests = CounterMetricFamily(
            'fedgate_endpoint_requests', 'Requests sent to each endpoint, by operation',
            labels=['endpoint', 'op'])
        timeouts = CounterMetricFamily(
            'fedgate_endpoint_timeouts', 'Endpoint requests cut off by a deadline',
            labels=['endpoint'])
        online = GaugeMetricFamily(
            'fedgate_endpoint_online', '1 while the health poller considers the endpoint online',
            labels=['endpoint'])
        for endpoint in sorted(self.endpoints, key=lambda e: e.id):
            for op, count in sorted(endpoint.request_counts().items()):
                requests.add_metric([endpoint.id, op], count)
            timeouts.add_metric([endpoint.id], endpoint.timeouts)
            online.add_metric([endpoint.id], int(endpoint.status is EndpointStatus.ONLINE))
        yield requests
        yield timeouts
        yield online


class GatewayMetrics:
    """Counters of one gateway instance"""

    content_type = CONTENT_TYPE_LATEST

    def __init__(self, registry: Optional[CollectorRegistry] = None):
        self.registry = registry if registry is not None else CollectorRegistry()
        self.requests = Counter(
            'fedgate_requests', 'Client requests answered, by method and status',
            ['method', 'status'], registry=self.registry)
        self.cache_hits = Counter(
            'fedgate_cache_hits', 'Resolutions answered from cache, by level',
            ['level'], registry=self.registry)
        self.cache_misses = Counter(
            'fedgate_cache_misses', 'Resolutions that had to ask the endpoints',
            registry=self.registry)

    def watch_endpoints(self, endpoints: Iterable[Endpoint]) -> None:
        self.registry.register(EndpointCollector(endpoints))

    def value(self, name: str, **labels: str) -> float:
        """Current value of one sample, 0 when it was never recorded"""
        return self.registry.get_sample_value(name, labels) or 0

    def render(self) -> bytes:
        return generate_latest(self.registry)
