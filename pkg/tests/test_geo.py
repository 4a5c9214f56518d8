import math
import os
import random

import pytest

from conftest import FIXTURES
from server.models.geo import (
    EARTH_RADIUS_KM, GeoDatabase, GeoDatabaseError, GeoPoint, haversine, rank, wrap_longitude,
)

CERN = GeoPoint(46.23, 6.05)
TRIUMF = GeoPoint(49.25, -123.23)
UVIC = GeoPoint(48.46, -123.31)


def random_point(rng):
    lon = rng.uniform(-180.0, 180.0)
    return GeoPoint(rng.uniform(-90.0, 90.0), lon if lon > -180.0 else 180.0)


def test_identity_and_antipodes():
    assert haversine(CERN, CERN) == 0.0
    antipodal = haversine(GeoPoint(0.0, 0.0), GeoPoint(0.0, 180.0))
    assert antipodal == pytest.approx(math.pi * EARTH_RADIUS_KM, abs=0.1)
    assert antipodal == pytest.approx(20015.1, abs=0.1)
    assert haversine(GeoPoint(90.0, 0.0), GeoPoint(-90.0, 0.0)) == pytest.approx(math.pi * EARTH_RADIUS_KM)


def test_known_distance():
    # Vancouver site to Victoria site, roughly 88 km across the strait
    assert 80 < haversine(TRIUMF, UVIC) < 100


def spherical_cosines_km(a, b):
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlon = math.radians(b.lon - a.lon)
    cos_c = math.sin(lat1) * math.sin(lat2) + math.cos(lat1) * math.cos(lat2) * math.cos(dlon)
    return EARTH_RADIUS_KM * math.acos(max(-1.0, min(1.0, cos_c)))


def test_geneva_to_vancouver():
    geneva, vancouver = GeoPoint(46.23, 6.05), GeoPoint(49.25, -123.12)
    assert haversine(geneva, vancouver) == pytest.approx(8319.7, abs=1.0)
    assert haversine(geneva, vancouver) == pytest.approx(spherical_cosines_km(geneva, vancouver), abs=0.01)


def test_random_pairs_properties():
    """Test symmetry, bounds and rotation invariance over 10,000 random pairs"""
    rng = random.Random(1234)
    for _ in range(10000):
        a, b = random_point(rng), random_point(rng)
        d = haversine(a, b)
        assert 0.0 <= d <= math.pi * EARTH_RADIUS_KM + 1e-6
        assert d == pytest.approx(haversine(b, a), abs=1e-9)
        shift = rng.uniform(-360.0, 360.0)
        rotated = haversine(GeoPoint(a.lat, wrap_longitude(a.lon + shift)),
                            GeoPoint(b.lat, wrap_longitude(b.lon + shift)))
        assert rotated == pytest.approx(d, abs=1e-6)


def test_wrap_longitude():
    assert wrap_longitude(190.0) == pytest.approx(-170.0)
    assert wrap_longitude(-180.0) == pytest.approx(180.0)
    assert wrap_longitude(540.0) == pytest.approx(180.0)
    assert wrap_longitude(12.5) == pytest.approx(12.5)


@pytest.mark.parametrize('lat, lon', [(90.1, 0), (-91, 0), (0, -180.0), (0, 181)])
def test_geopoint_bounds(lat, lon):
    with pytest.raises(ValueError):
        GeoPoint(lat, lon)


def test_rank_orders_by_distance():
    replicas = [('uvic', UVIC), ('cern', CERN), ('triumf', TRIUMF)]
    assert rank(replicas, GeoPoint(46.20, 6.14)) == ['cern', 'triumf', 'uvic']
    assert rank(replicas, GeoPoint(48.43, -123.37)) == ['uvic', 'triumf', 'cern']
    assert rank(replicas, GeoPoint(49.28, -123.12)) == ['triumf', 'uvic', 'cern']


def test_rank_ties_and_unknown_client():
    replicas = [('b', CERN), ('a', CERN), ('c', UVIC)]
    assert rank(replicas, CERN) == ['a', 'b', 'c']
    assert rank(replicas, None) == ['a', 'b', 'c']
    assert rank([], CERN) == []


def test_rank_is_permutation_invariant():
    rng = random.Random(99)
    replicas = [(f'site{i}', random_point(rng)) for i in range(8)]
    client = random_point(rng)
    expected = rank(replicas, client)
    for _ in range(50):
        shuffled = replicas[:]
        rng.shuffle(shuffled)
        assert rank(shuffled, client) == expected


@pytest.fixture
def geo():
    return GeoDatabase.load(os.path.join(FIXTURES, 'geo.csv'))


def test_lookup_longest_prefix(geo):
    assert len(geo) == 6
    assert geo.lookup('192.0.2.77') == GeoPoint(46.20, 6.14)
    assert geo.lookup('10.1.2.3') == GeoPoint(51.5, -0.12)
    assert geo.lookup('10.2.2.3') == GeoPoint(0.0, 0.0)
    assert geo.lookup('2001:db8::1') == GeoPoint(35.68, 139.69)
    assert geo.lookup('::ffff:198.51.100.4') == GeoPoint(49.28, -123.12)


def test_lookup_misses(geo):
    assert geo.lookup('8.8.8.8') is None
    assert geo.lookup('not-an-ip') is None
    assert geo.lookup('') is None
    assert GeoDatabase().lookup('192.0.2.1') is None


def test_lookup_is_deterministic(geo):
    assert geo.lookup('203.0.113.9') == geo.lookup('203.0.113.9')


@pytest.mark.parametrize('line', ['192.0.2.0/24,46.2', 'not-a-cidr,1,2', '192.0.2.0/24,95,0'])
def test_load_rejects_bad_entries(tmp_path, line):
    path = tmp_path / 'geo.csv'
    path.write_text(f'# header\n{line}\n')
    with pytest.raises(GeoDatabaseError, match='entry 1'):
        GeoDatabase.load(str(path))
