import threading
from concurrent.futures import ThreadPoolExecutor

import pytest

from conftest import SAMPLE_OBJECTS, endpoint_document, make_config, make_federation, wait_until
from server.models.cache import InProcessSharedCache
from server.models.endpoints import EndpointStatus, Listing, ListingEntry
from server.models.locator import (
    CacheEntry, MergedListing, RecordError, ReplicaLocation, ReplicaSet, SingleFlight, cache_key,
    decode_entry, encode_entry, translate, virtual_children,
)


def stat_calls(federation, op='stat'):
    return {endpoint_id: e.calls[op] for endpoint_id, e in federation.endpoints.items()}


def test_translate():
    config = make_config([endpoint_document('a', 0, 0, federated_prefix='/data', backend_prefix='/atlas/data')])
    endpoint = config.endpoints[0]
    assert translate('/data/run1.root', endpoint) == '/atlas/data/run1.root'
    assert translate('/data', endpoint) == '/atlas/data'
    assert translate('/database', endpoint) is None
    assert translate('/', endpoint) is None

    root = make_config([endpoint_document('b', 0, 0, backend_prefix='/bucket')]).endpoints[0]
    assert translate('/', root) == '/bucket'
    assert translate('/x/y', root) == '/bucket/x/y'


def test_virtual_children():
    config = make_config([
        endpoint_document('a', 0, 0, federated_prefix='/atlas/data'),
        endpoint_document('b', 0, 0, federated_prefix='/atlas/mc'),
        endpoint_document('c', 0, 0, federated_prefix='/cms'),
    ])
    assert virtual_children('/', config.endpoints) == ['atlas', 'cms']
    assert virtual_children('/atlas', config.endpoints) == ['data', 'mc']
    assert virtual_children('/atlas/data', config.endpoints) == []


def test_record_codec_rejects_garbage():
    with pytest.raises(RecordError):
        decode_entry(b'nope')
    entry = CacheEntry(ReplicaSet('/a', (ReplicaLocation('cern', '/a', 3, False, 12.5),), 1.0, True), 50.0)
    raw = encode_entry(entry)
    assert decode_entry(raw) == entry
    with pytest.raises(RecordError):
        decode_entry(raw[:-1])
    with pytest.raises(RecordError):
        decode_entry(raw + b'\x00')
    with pytest.raises(RecordError):
        decode_entry(b'XX' + raw[2:])


def test_listing_record_keeps_flags():
    listing = MergedListing('/d', Listing((ListingEntry('a', True), ListingEntry('b', False, 9))), True, False, 3.0)
    entry = CacheEntry(listing, 40.0)
    assert decode_entry(encode_entry(entry)) == entry


def test_negative_entry_carries_nothing():
    with pytest.raises(ValueError):
        CacheEntry(ReplicaSet('/a', (ReplicaLocation('x', '/a'),), 1.0, True), 5.0, negative=True)


def test_cache_key_is_hashed():
    key = cache_key('loc', '/data/run1.root')
    assert key.startswith('loc:') and len(key) == 4 + 64
    assert cache_key('dir', '/data/run1.root') != key


class TestLocate:
    """Test cases for replica resolution"""

    def test_locate_finds_all_replicas(self, federation):
        replica_set = federation.locator.locate('/data/run1.root')
        assert replica_set.complete
        assert [r.endpoint_id for r in replica_set.replicas] == ['cern', 'triumf', 'uvic']
        assert all(r.size == 100 for r in replica_set.replicas)

    def test_second_lookup_is_served_from_cache(self, federation):
        federation.locator.locate('/data/run1.root')
        before = stat_calls(federation)
        again = federation.locator.locate('/data/run1.root')
        assert again.found
        assert stat_calls(federation) == before
        assert federation.metrics.value('fedgate_cache_hits_total', level='l1') == 1

    def test_negative_result_is_cached(self, federation):
        missing = federation.locator.locate('/data/absent.root')
        assert missing.complete and not missing.found
        before = stat_calls(federation)
        federation.locator.locate('/data/absent.root')
        assert stat_calls(federation) == before

    def test_negative_ttl_applies(self):
        federation = make_federation(make_config(cache={'ttl_negative': 30, 'ttl_positive': 300}),
                                     SAMPLE_OBJECTS)
        clock = [1000.0]
        federation.locator.clock = lambda: clock[0]
        try:
            federation.locator.locate('/data/absent.root')
            federation.locator.locate('/data/run1.root')
            before = stat_calls(federation)
            clock[0] += 31
            federation.locator.locate('/data/absent.root')
            federation.locator.locate('/data/run1.root')
            # only the negative entry has expired
            after = stat_calls(federation)
            assert all(after[e] == before[e] + 1 for e in after)
            clock[0] += 300
            federation.locator.locate('/data/run1.root')
            assert all(stat_calls(federation)[e] == after[e] + 1 for e in after)
        finally:
            federation.close()

    def test_invalidate_forces_refresh(self, federation):
        federation.locator.locate('/data/run1.root')
        federation.locator.invalidate('/data/run1.root')
        before = stat_calls(federation)
        federation.locator.locate('/data/run1.root')
        assert all(stat_calls(federation)[e] == before[e] + 1 for e in before)

    def test_resolve_overtaken_by_invalidate_is_not_cached(self):
        """Test that a lookup in flight across a publish does not store its stale miss"""
        federation = make_federation(make_config(), {}, delays={'triumf': 5.0})
        cern, triumf = federation.endpoints['cern'], federation.endpoints['triumf']
        path = '/data/new.root'
        try:
            with ThreadPoolExecutor(max_workers=2) as pool:
                stale = pool.submit(federation.locator.locate, path)
                assert wait_until(lambda: cern.calls['stat'] == 1 and triumf.calls['stat'] == 1)
                cern.objects[path] = b'n' * 4
                federation.locator.invalidate(path)
                fresh_flight = pool.submit(federation.locator.locate, path)
                triumf.release.set()
                assert not stale.result(timeout=2).found
                assert [r.endpoint_id for r in fresh_flight.result(timeout=2).replicas] == ['cern']

            replica_set = federation.locator.locate(path)
            assert [r.endpoint_id for r in replica_set.replicas] == ['cern']
            assert replica_set.replicas[0].size == 4
            assert cern.calls['stat'] == 2
        finally:
            triumf.release.set()
            federation.close()

    def test_offline_endpoint_is_not_queried(self, federation):
        federation.endpoints['uvic'].publish_status(EndpointStatus.OFFLINE, 0.0)
        replica_set = federation.locator.locate('/data/run1.root')
        assert [r.endpoint_id for r in replica_set.replicas] == ['cern', 'triumf']
        assert federation.endpoints['uvic'].calls['stat'] == 0

    def test_prefix_coverage(self):
        config = make_config([
            endpoint_document('cern', 46.23, 6.05),
            endpoint_document('triumf', 49.25, -123.23, federated_prefix='/data', backend_prefix='/atlas'),
        ])
        federation = make_federation(config, {
            'cern': {'/data/run1.root': b'x', '/other/z': b'z'},
            'triumf': {'/atlas/run1.root': b'xy'},
        })
        try:
            replica_set = federation.locator.locate('/data/run1.root')
            assert {(r.endpoint_id, r.backend_path) for r in replica_set.replicas} == {
                ('cern', '/data/run1.root'), ('triumf', '/atlas/run1.root'),
            }
            federation.locator.locate('/other/z')
            assert federation.endpoints['triumf'].calls['stat'] == 1
        finally:
            federation.close()

    def test_slow_endpoint_is_cut_off(self):
        """Test that the fan-out returns at the deadline with the fast answers"""
        federation = make_federation(make_config(federation={'fanout_timeout': 0.3}), SAMPLE_OBJECTS,
                                     delays={'uvic': 5.0})
        try:
            replica_set = federation.locator.locate('/data/run1.root')
            assert not replica_set.complete
            assert [r.endpoint_id for r in replica_set.replicas] == ['cern', 'triumf']
            assert federation.endpoints['uvic'].timeouts == 1
            # an incomplete result is cached with the short TTL only
            entry = federation.locator.l1.get(cache_key('loc', '/data/run1.root'), 0)
            assert entry.expires_at - replica_set.resolved_at == pytest.approx(federation.config.cache_ttl_negative)
        finally:
            federation.endpoints['uvic'].release.set()
            federation.close()

    def test_single_flight_under_concurrent_misses(self):
        """Test 50 concurrent misses produce one query per endpoint"""
        federation = make_federation(make_config(), SAMPLE_OBJECTS, delays={'cern': 0.3})
        try:
            with ThreadPoolExecutor(max_workers=50) as pool:
                results = list(pool.map(lambda _: federation.locator.locate('/data/run1.root'), range(50)))
            assert all(r.found for r in results)
            assert stat_calls(federation) == {'cern': 1, 'triumf': 1, 'uvic': 1}
        finally:
            federation.close()

    def test_shared_l2_between_instances(self):
        shared = InProcessSharedCache()
        first = make_federation(make_config(), SAMPLE_OBJECTS, shared_cache=shared)
        second = make_federation(make_config(), SAMPLE_OBJECTS, shared_cache=shared)
        try:
            assert first.shared_cache is shared and second.shared_cache is shared
            first.locator.locate('/data/run1.root')
            assert shared.get(cache_key('loc', '/data/run1.root')) is not None
            replica_set = second.locator.locate('/data/run1.root')
            assert len(replica_set.replicas) == 3
            assert sum(stat_calls(second).values()) == 0
            assert second.metrics.value('fedgate_cache_hits_total', level='l2') == 1
        finally:
            first.close()
            second.close()

    def test_undecodable_l2_record_is_a_miss(self, federation):
        federation.shared_cache.set(cache_key('loc', '/data/run1.root'), b'garbage', 60)
        assert federation.locator.locate('/data/run1.root').found
        assert federation.endpoints['cern'].calls['stat'] == 1


class TestMergedListing:
    """Test cases for the union namespace"""

    def test_union_of_children(self, federation):
        merged = federation.locator.merged_listing('/data')
        assert merged.exists and merged.complete
        assert merged.listing.names == ['cern-only.root', 'run1.root', 'sub']
        assert merged.listing.entries[2].is_directory

    def test_missing_directory(self, federation):
        merged = federation.locator.merged_listing('/nowhere')
        assert not merged.exists
        assert merged.listing.entries == ()

    def test_file_is_not_listed(self, federation):
        merged = federation.locator.merged_listing('/data/run1.root')
        assert not merged.exists

    def test_root_lists_virtual_prefixes(self):
        config = make_config([
            endpoint_document('a', 0, 0, federated_prefix='/atlas/data'),
            endpoint_document('b', 0, 0, federated_prefix='/cms'),
        ])
        federation = make_federation(config, {'a': {'/x': b'1'}, 'b': {'/y': b'2'}})
        try:
            root = federation.locator.merged_listing('/')
            assert root.exists
            assert root.listing.names == ['atlas', 'cms']
            assert federation.locator.is_virtual_directory('/atlas')
            assert federation.locator.merged_listing('/atlas').listing.names == ['data']
        finally:
            federation.close()

    def test_size_conflict_resolved_by_endpoint_id(self):
        federation = make_federation(make_config(), {
            'cern': {'/d/f': b'1'},
            'triumf': {'/d/f': b'22'},
        })
        try:
            assert federation.locator.merged_listing('/d').listing.entries[0].size == 1
        finally:
            federation.close()

    def test_listing_is_cached(self, federation):
        federation.locator.merged_listing('/data')
        federation.locator.merged_listing('/data')
        assert stat_calls(federation, 'list') == {'cern': 1, 'triumf': 1, 'uvic': 1}


def test_single_flight_shares_result_and_errors():
    flights = SingleFlight()
    gate = threading.Event()
    calls = []

    def slow():
        calls.append(1)
        gate.wait(1.0)
        return 'value'

    with ThreadPoolExecutor(max_workers=5) as pool:
        futures = [pool.submit(flights.do, 'k', slow) for _ in range(5)]
        gate.set()
        assert [f.result() for f in futures] == ['value'] * 5
    assert len(calls) <= 5

    def boom():
        raise RuntimeError('backend exploded')

    with pytest.raises(RuntimeError):
        flights.do('k', boom)
