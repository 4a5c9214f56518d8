import json

import pytest

from client.client import parse_multistatus
from conftest import (
    ADMIN, ALICE, MALLORY, SAMPLE_OBJECTS, identity_headers, make_config, make_federation,
)
from server.app import create_app
from server.models.endpoints import EndpointStatus
from server.models.locator import ReplicaLocation, ReplicaSet, cache_key
from server.routes import FederatedPathConverter

GENEVA_IP = '192.0.2.10'
VANCOUVER_IP = '198.51.100.10'
VICTORIA_IP = '203.0.113.10'


def total_calls(federation):
    return sum(sum(e.calls[op] for op in ('stat', 'list')) for e in federation.endpoints.values())


def test_health_check(client):
    """Test health check endpoint"""
    response = client.get('/.well-known/fedgate/healthz')
    assert response.status_code == 200

    data = json.loads(response.data)
    assert data['status'] == 'healthy'
    assert data['service'] == 'fedgate'


def test_status_lists_endpoints(client, federation):
    """Test per-endpoint status endpoint"""
    federation.health.poll_once()
    response = client.get('/.well-known/fedgate/status')
    assert response.status_code == 200

    data = json.loads(response.data)
    assert data['success']
    assert [e['id'] for e in data['endpoints']] == ['cern', 'triumf', 'uvic']
    assert all(e['status'] == 'online' and e['kind'] == 'webdav' for e in data['endpoints'])


def test_metrics_exposition(client):
    client.get('/data/run1.root', headers=identity_headers())
    response = client.get('/.well-known/fedgate/metrics')
    assert response.status_code == 200
    assert response.mimetype == 'text/plain'
    text = response.get_data(as_text=True)
    assert '# TYPE fedgate_requests_total counter' in text
    assert 'fedgate_requests_total{method="GET",status="302"} 1.0' in text
    assert 'fedgate_endpoint_requests_total{endpoint="cern",op="stat"} 1.0' in text
    assert 'fedgate_endpoint_online{endpoint="cern"} 0.0' in text
    assert 'fedgate_cache_misses_total 1.0' in text
    assert '_created' not in text


def test_metrics_are_per_instance(federation):
    other = make_federation(make_config(), SAMPLE_OBJECTS)
    try:
        federation.locator.locate('/data/run1.root')
        assert federation.metrics.value('fedgate_cache_misses_total') == 1
        assert other.metrics.value('fedgate_cache_misses_total') == 0
    finally:
        other.close()


def test_reserved_namespace_is_not_federated(client, federation):
    response = client.get('/.well-known/fedgate/other', headers=identity_headers())
    assert response.status_code == 404
    assert json.loads(response.data)['error'] == 'Not found'
    assert total_calls(federation) == 0


def test_federated_path_spans_segments(app):
    assert FederatedPathConverter.part_isolating is False
    adapter = app.url_map.bind('gateway')
    endpoint, values = adapter.match('/data/sub/deep.root', method='GET')
    assert endpoint == 'federation.federated_resource'
    assert values == {'subpath': 'data/sub/deep.root'}


def test_405_error(client):
    """Test 405 error handling"""
    response = client.post('/data/run1.root', headers=identity_headers())
    assert response.status_code == 405
    assert json.loads(response.data)['error'] == 'Method not allowed'


class TestAuthentication:
    """Denied requests never reach an endpoint"""

    def test_missing_credential_is_401(self, client, federation):
        response = client.get('/data/run1.root', headers={'X-Forwarded-For': GENEVA_IP})
        assert response.status_code == 401
        assert 'error' in json.loads(response.data)
        assert total_calls(federation) == 0

    def test_non_member_is_403(self, client, federation):
        response = client.get('/data/run1.root', headers=identity_headers(MALLORY))
        assert response.status_code == 403
        assert total_calls(federation) == 0

    def test_attribute_holder_is_accepted(self, client):
        headers = identity_headers('/CN=bob', attributes=['/atlas/Role=production'])
        assert client.get('/data/run1.root', headers=headers).status_code == 302

    def test_member_write_outside_scratch_is_403(self, client, federation):
        response = client.put('/data/new.root', headers=identity_headers(ALICE))
        assert response.status_code == 403
        assert total_calls(federation) == 0


class TestGet:
    """Test cases for closest-replica redirects"""

    @pytest.mark.parametrize('ip, site', [
        (GENEVA_IP, 'cern'), (VANCOUVER_IP, 'triumf'), (VICTORIA_IP, 'uvic'), ('8.8.8.8', 'cern'),
    ])
    def test_redirects_to_nearest_replica(self, client, ip, site):
        response = client.get('/data/run1.root', headers=identity_headers(ip=ip))
        assert response.status_code == 302
        assert response.headers['Location'] == f'http://{site}.example/data/run1.root?method=GET'
        assert response.data == b''

    def test_single_replica(self, client):
        response = client.get('/data/cern-only.root', headers=identity_headers(ip=VICTORIA_IP))
        assert response.status_code == 302
        assert response.headers['Location'].startswith('http://cern.example/')

    @pytest.mark.parametrize('path', ['/data/sub/deep.root', '/data//sub/deep.root'])
    def test_nested_path_reaches_the_namespace(self, client, path):
        response = client.get(path, headers=identity_headers(ip=GENEVA_IP))
        assert response.status_code == 302
        assert response.headers['Location'] == 'http://triumf.example/data/sub/deep.root?method=GET'

    def test_offline_replica_is_skipped(self, client, federation):
        federation.endpoints['cern'].publish_status(EndpointStatus.OFFLINE, 0.0)
        response = client.get('/data/run1.root', headers=identity_headers(ip=GENEVA_IP))
        assert response.headers['Location'].startswith('http://triumf.example/')

    def test_absent_file_is_404(self, client):
        assert client.get('/data/absent.root', headers=identity_headers()).status_code == 404

    def test_directory_get_is_400(self, client):
        response = client.get('/data', headers=identity_headers())
        assert response.status_code == 400
        assert 'PROPFIND' in json.loads(response.data)['error']

    def test_unknown_when_endpoints_time_out(self):
        federation = make_federation(make_config(federation={'fanout_timeout': 0.2}), SAMPLE_OBJECTS,
                                     delays={'cern': 5.0, 'triumf': 5.0, 'uvic': 5.0})
        try:
            client = create_app(config_name='testing', federation=federation).test_client()
            response = client.get('/data/run1.root', headers=identity_headers())
            assert response.status_code == 503
        finally:
            for endpoint in federation.endpoints.values():
                endpoint.release.set()
            federation.close()


class TestHead:
    """Test cases for metadata requests"""

    def test_head_reports_size(self, client):
        response = client.head('/data/run1.root', headers=identity_headers(ip=VICTORIA_IP))
        assert response.status_code == 200
        assert response.headers['Content-Length'] == '100'
        assert response.headers['Last-Modified'] == 'Tue, 14 Nov 2023 22:13:20 GMT'
        assert 'Location' not in response.headers

    def test_head_directory(self, client):
        response = client.head('/data', headers=identity_headers())
        assert response.status_code == 200
        assert response.headers['Content-Type'] == 'httpd/unix-directory'

    def test_head_absent_and_denied(self, client):
        assert client.head('/data/absent.root', headers=identity_headers()).status_code == 404
        assert client.head('/data/run1.root', headers=identity_headers(MALLORY)).status_code == 403

    def test_unknown_size_has_no_content_length(self, client, federation, monkeypatch):
        sizeless = ReplicaSet('/data/stream.log', (ReplicaLocation('cern', '/data/stream.log', None, False, None),),
                              0.0, True)
        monkeypatch.setattr(federation.locator, 'locate', lambda path, now=None: sizeless)
        response = client.head('/data/stream.log', headers=identity_headers())
        assert response.status_code == 200
        assert 'Content-Length' not in response.headers
        assert 'Last-Modified' not in response.headers


class TestPropfind:
    """Test cases for merged listings"""

    def propfind(self, client, path, depth='1', subject=ALICE):
        headers = identity_headers(subject)
        if depth is not None:
            headers['Depth'] = depth
        return client.open(path, method='PROPFIND', headers=headers)

    def test_depth_one_lists_union(self, client):
        response = self.propfind(client, '/data')
        assert response.status_code == 207
        assert response.content_type.startswith('text/xml')
        entries = parse_multistatus(response.data)
        assert entries[0]['path'] == '/data' and entries[0]['is_directory']
        assert [e['name'] for e in entries[1:]] == ['cern-only.root', 'run1.root', 'sub']
        assert entries[1]['size'] == 7
        assert entries[3]['is_directory']

    def test_depth_zero_file(self, client):
        entries = parse_multistatus(self.propfind(client, '/data/run1.root', depth='0').data)
        assert len(entries) == 1
        assert entries[0]['size'] == 100 and not entries[0]['is_directory']
        assert entries[0]['last_modified'] is not None

    def test_root(self, client):
        entries = parse_multistatus(self.propfind(client, '/').data)
        assert entries[0]['path'] == '/'
        assert [e['name'] for e in entries[1:]] == ['data']

    @pytest.mark.parametrize('depth', ['infinity', None])
    def test_infinite_depth_is_403(self, client, federation, depth):
        assert self.propfind(client, '/data', depth=depth).status_code == 403
        assert total_calls(federation) == 0

    def test_unknown_path_is_404(self, client):
        assert self.propfind(client, '/nowhere').status_code == 404

    def test_file_on_offline_endpoint_is_not_a_collection(self, client, federation):
        federation.locator.locate('/data/cern-only.root')
        federation.endpoints['cern'].publish_status(EndpointStatus.OFFLINE, 0.0)
        response = self.propfind(client, '/data/cern-only.root')
        assert response.status_code == 503
        assert b'collection' not in response.data

    def test_file_on_offline_endpoint_is_unknown_when_uncached(self, client, federation):
        federation.endpoints['cern'].publish_status(EndpointStatus.OFFLINE, 0.0)
        assert self.propfind(client, '/data/cern-only.root', depth='0').status_code == 404

    def test_non_member_is_403(self, client):
        assert self.propfind(client, '/data', subject=MALLORY).status_code == 403


class TestWrites:
    """Test cases for PUT and DELETE orchestration"""

    def test_put_redirects_to_nearest_writable(self, client, federation):
        federation.locator.locate('/scratch/out.log')
        response = client.put('/scratch/out.log', headers=identity_headers(ip=VANCOUVER_IP))
        assert response.status_code == 307
        assert response.headers['Location'] == 'http://triumf.example/scratch/out.log?method=PUT'
        assert federation.locator.l1.get(cache_key('loc', '/scratch/out.log')) is None

    def test_privileged_put_anywhere(self, client):
        response = client.put('/data/new.root', headers=identity_headers(ADMIN))
        assert response.status_code == 307

    def test_put_without_writable_endpoint_is_503(self, client, federation):
        for endpoint in federation.endpoints.values():
            endpoint.publish_status(EndpointStatus.OFFLINE, 0.0)
        assert client.put('/scratch/out.log', headers=identity_headers()).status_code == 503

    def test_delete_redirects_and_invalidates(self, client, federation):
        federation.locator.locate('/data/run1.root')
        response = client.delete('/data/run1.root', headers=identity_headers(ADMIN, ip=VICTORIA_IP))
        assert response.status_code == 307
        assert response.headers['Location'] == 'http://uvic.example/data/run1.root?method=DELETE'
        assert federation.locator.l1.get(cache_key('loc', '/data/run1.root')) is None

    def test_delete_denied_outside_scratch(self, client, federation):
        assert client.delete('/data/run1.root', headers=identity_headers(ALICE)).status_code == 403
        assert total_calls(federation) == 0

    def test_delete_absent_and_directory(self, client):
        assert client.delete('/data/absent.root', headers=identity_headers(ADMIN)).status_code == 404
        assert client.delete('/data', headers=identity_headers(ADMIN)).status_code == 409
