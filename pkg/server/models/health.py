"""
Endpoint health polling.

The poller is the only writer of endpoint status. An endpoint goes offline
after ``failure_threshold`` consecutive failed probes and comes back online
on the first successful one.
"""

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional

from server.models.endpoints import Endpoint, EndpointStatus

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HealthState:
    endpoint_id: str
    status: EndpointStatus = EndpointStatus.UNKNOWN
    consecutive_failures: int = 0
    last_change: Optional[float] = None

    def to_dict(self) -> Dict[str, object]:
        return {
            'id': self.endpoint_id,
            'status': self.status.value,
            'consecutive_failures': self.consecutive_failures,
            'last_change': self.last_change,
        }


class HealthMonitor:
    """Probes every endpoint on a fixed interval and publishes its status"""

    def __init__(self, endpoints: Iterable[Endpoint], probe_timeout: float = 2.0,
                 failure_threshold: int = 2, clock=time.time):
        self.endpoints: List[Endpoint] = list(endpoints)
        self.probe_timeout = probe_timeout
        self.failure_threshold = failure_threshold
        self.clock = clock
        self._states: Dict[str, HealthState] = {
            endpoint.id: HealthState(endpoint.id) for endpoint in self.endpoints
        }
        self._lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=max(4, len(self.endpoints) * 2),
                                            thread_name_prefix='fedgate-probe')
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self.cycles = 0

    def states(self) -> List[HealthState]:
        with self._lock:
            return [self._states[endpoint.id] for endpoint in self.endpoints]

    def _next_state(self, state: HealthState, healthy: bool, now: float) -> HealthState:
        if healthy:
            if state.status is EndpointStatus.ONLINE and state.consecutive_failures == 0:
                return state
            changed = state.status is not EndpointStatus.ONLINE
            return replace(state, status=EndpointStatus.ONLINE, consecutive_failures=0,
                           last_change=now if changed else state.last_change)
        failures = state.consecutive_failures + 1
        if failures >= self.failure_threshold and state.status is not EndpointStatus.OFFLINE:
            return replace(state, status=EndpointStatus.OFFLINE, consecutive_failures=failures,
                           last_change=now)
        return replace(state, consecutive_failures=failures)

    def poll_once(self, now: Optional[float] = None) -> List[HealthState]:
        """Probe all endpoints concurrently and apply the transition rules"""
        now = self.clock() if now is None else now
        deadline = time.monotonic() + self.probe_timeout
        futures = {self._executor.submit(endpoint.probe, deadline): endpoint for endpoint in self.endpoints}
        done, _ = wait(futures, timeout=self.probe_timeout)
        results = {}
        for future, endpoint in futures.items():
            healthy = False
            if future in done:
                try:
                    healthy = bool(future.result())
                except Exception as e:
                    logger.warning(f"Probe of {endpoint.id} raised: {str(e)}")
            results[endpoint.id] = healthy

        with self._lock:
            for endpoint in self.endpoints:
                previous = self._states[endpoint.id]
                state = self._next_state(previous, results[endpoint.id], now)
                self._states[endpoint.id] = state
                endpoint.publish_status(state.status, now)
                if state.status is not previous.status:
                    log = logger.info if state.status is EndpointStatus.ONLINE else logger.warning
                    log(f"Endpoint {endpoint.id} is now {state.status.value} "
                        f"after {state.consecutive_failures} consecutive failures")
            self.cycles += 1
            return [self._states[endpoint.id] for endpoint in self.endpoints]

    def run_poller(self, interval: float, stop: Optional[threading.Event] = None) -> None:
        """Poll every ``interval`` seconds until ``stop`` is set"""
        stop = stop or self._stop
        while not stop.is_set():
            started = time.monotonic()
            try:
                self.poll_once()
            except Exception as e:
                logger.error(f"Health poll failed: {str(e)}")
            stop.wait(max(0.0, interval - (time.monotonic() - started)))

    def start(self, interval: float) -> None:
        if self._thread is not None and self._thread.is_alive():
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self.run_poller, args=(interval, self._stop),
                                        name='fedgate-health', daemon=True)
        self._thread.start()
        logger.info(f"Health poller started, interval {interval}s")

    def stop(self, timeout: Optional[float] = None) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)
            self._thread = None

    def close(self) -> None:
        self.stop(timeout=self.probe_timeout + 1.0)
        self._executor.shutdown(wait=False, cancel_futures=True)
