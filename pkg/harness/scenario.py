"""
Line-oriented scenario scripts driven against a running federation.

    # comment
    GET 192.0.2.10 /data/run1.root => 302 @cern
    PUT 198.51.100.10 /scratch/out.log AS member => 307 @triumf
    PROPFIND 203.0.113.10 /data => 207
    SET down cern true
    SLEEP 250

Requests run as the ``member`` identity unless ``AS <alias>`` names another
alias of the scenario. ``SET down`` waits for the health poller to notice.
The first mismatching step stops the run.
"""

import logging
import re
import time
from dataclasses import dataclass, field
from typing import List, Optional, Union

from harness.federation import FederationHandle

logger = logging.getLogger(__name__)

REQUEST_VERBS = ('GET', 'HEAD', 'PUT', 'DELETE', 'PROPFIND')

_REQUEST = re.compile(
    r'^(?P<verb>GET|HEAD|PUT|DELETE|PROPFIND)\s+(?P<ip>\S+)\s+(?P<path>/\S*)'
    r'(?:\s+AS\s+(?P<identity>\S+))?\s*=>\s*(?P<status>\d{3})(?:\s+@(?P<endpoint>\S+))?$'
)
_SET_DOWN = re.compile(r'^SET\s+down\s+(?P<endpoint>\S+)\s+(?P<value>true|false)$')
_SLEEP = re.compile(r'^SLEEP\s+(?P<ms>\d+)$')


class ScenarioError(ValueError):
    """A scenario script could not be parsed"""


@dataclass(frozen=True)
class RequestStep:
    line_no: int
    text: str
    verb: str
    ip: str
    path: str
    status: int
    endpoint: Optional[str] = None
    identity: str = 'member'


@dataclass(frozen=True)
class SetDownStep:
    line_no: int
    text: str
    endpoint: str
    down: bool


@dataclass(frozen=True)
class SleepStep:
    line_no: int
    text: str
    seconds: float


Step = Union[RequestStep, SetDownStep, SleepStep]


@dataclass
class StepResult:
    index: int
    line_no: int
    text: str
    passed: bool
    detail: str = ''
    status: Optional[int] = None
    endpoint: Optional[str] = None


@dataclass
class ScenarioReport:
    path: str
    steps: List[StepResult] = field(default_factory=list)
    failed_at: Optional[int] = None

    @property
    def passed(self) -> bool:
        return self.failed_at is None


def parse_script(text: str) -> List[Step]:
    steps: List[Step] = []
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        match = _REQUEST.match(line)
        if match:
            steps.append(RequestStep(
                line_no, line, match['verb'], match['ip'], match['path'], int(match['status']),
                match['endpoint'], match['identity'] or 'member'))
            continue
        match = _SET_DOWN.match(line)
        if match:
            steps.append(SetDownStep(line_no, line, match['endpoint'], match['value'] == 'true'))
            continue
        match = _SLEEP.match(line)
        if match:
            steps.append(SleepStep(line_no, line, int(match['ms']) / 1000.0))
            continue
        raise ScenarioError(f"line {line_no}: cannot parse {line!r}")
    return steps


def _run_request(handle: FederationHandle, step: RequestStep, index: int) -> StepResult:
    if step.identity not in handle.spec.identities:
        return StepResult(index, step.line_no, step.text, False, f"unknown identity {step.identity!r}")
    headers = {'Depth': '1'} if step.verb == 'PROPFIND' else {}
    with handle.client(step.ip, step.identity) as client:
        response = client.request(step.verb, step.path, headers=headers)
    endpoint = handle.endpoint_for_url(response.headers.get('Location'))
    result = StepResult(index, step.line_no, step.text, True, status=response.status_code, endpoint=endpoint)
    if response.status_code != step.status:
        result.passed = False
        result.detail = f"expected {step.status}, got {response.status_code}"
    elif step.endpoint is not None and endpoint != step.endpoint:
        result.passed = False
        result.detail = f"expected redirect to {step.endpoint}, got {endpoint or 'no redirect'}"
    return result


def run_steps(handle: FederationHandle, steps: List[Step], path: str = '<inline>') -> ScenarioReport:
    report = ScenarioReport(path)
    for index, step in enumerate(steps):
        if isinstance(step, RequestStep):
            result = _run_request(handle, step, index)
        elif isinstance(step, SetDownStep):
            result = StepResult(index, step.line_no, step.text, True)
            if step.endpoint not in handle.simulators:
                result.passed = False
                result.detail = f"unknown endpoint {step.endpoint!r}"
            else:
                handle.set_down(step.endpoint, step.down)
                handle.wait_for_poll(handle.config.failure_threshold if step.down else 1)
        else:
            time.sleep(step.seconds)
            result = StepResult(index, step.line_no, step.text, True)
        report.steps.append(result)
        if not result.passed:
            report.failed_at = index
            logger.warning(f"Scenario {path} failed at step {index} (line {step.line_no}): {result.detail}")
            break
    return report


def run_scenario_script(path: str, handle: FederationHandle) -> ScenarioReport:
    """Parse and execute a scenario file against ``handle``"""
    with open(path, encoding='utf-8') as f:
        steps = parse_script(f.read())
    return run_steps(handle, steps, path)
