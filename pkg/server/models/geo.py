"""
GeoIP lookup and proximity ranking of replica endpoints.

The geo database is a local CSV file of ``cidr,lat,lon`` rows. Lookups use
longest-prefix match over IPv4 and IPv6 networks; ranking orders replicas by
great-circle distance from the client, falling back to endpoint id.
"""

import csv
import ipaddress
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0

IPNetwork = Union[ipaddress.IPv4Network, ipaddress.IPv6Network]


class GeoDatabaseError(ValueError):
    """Raised when a geo database file cannot be parsed"""


def wrap_longitude(lon: float) -> float:
    """Fold a longitude into (-180, 180]"""
    wrapped = math.fmod(lon + 180.0, 360.0)
    if wrapped <= 0.0:
        wrapped += 360.0
    return wrapped - 180.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"Latitude out of range: {self.lat}")
        if not -180.0 < self.lon <= 180.0:
            raise ValueError(f"Longitude out of range: {self.lon}")

    @classmethod
    def parse(cls, lat, lon) -> 'GeoPoint':
        return cls(float(lat), float(lon))


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in kilometers between two points"""
    lat1 = math.radians(a.lat)
    lat2 = math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    sin_lat = math.sin(dlat * 0.5)
    sin_lon = math.sin(dlon * 0.5)
    h = sin_lat * sin_lat + math.cos(lat1) * math.cos(lat2) * sin_lon * sin_lon
    h = min(1.0, max(0.0, h))
    return EARTH_RADIUS_KM * 2.0 * math.asin(math.sqrt(h))


def rank(replicas: Sequence[Tuple[str, GeoPoint]], client: Optional[GeoPoint]) -> List[str]:
    """Order endpoint ids by distance to the client, ties and unknown clients by id"""
    if client is None:
        return sorted(endpoint_id for endpoint_id, _ in replicas)
    keyed = sorted(
        (haversine(client, location), endpoint_id)
        for endpoint_id, location in replicas
    )
    return [endpoint_id for _, endpoint_id in keyed]


class GeoDatabase:
    """Immutable CIDR -> location table with longest-prefix lookup"""

    def __init__(self, entries: Iterable[Tuple[Union[str, IPNetwork], GeoPoint]] = ()):
        self.entries: List[Tuple[IPNetwork, GeoPoint]] = []
        # (ip version, prefix length) -> {network: location}
        self._tables: Dict[Tuple[int, int], Dict[IPNetwork, GeoPoint]] = {}
        for cidr, location in entries:
            network = ipaddress.ip_network(cidr, strict=False)
            self.entries.append((network, location))
            self._tables.setdefault((network.version, network.prefixlen), {})[network] = location
        self._prefixes = {
            version: sorted(
                (plen for v, plen in self._tables if v == version), reverse=True
            )
            for version in (4, 6)
        }

    def __len__(self):
        return len(self.entries)

    @classmethod
    def load(cls, path: str) -> 'GeoDatabase':
        """Load a ``cidr,lat,lon`` CSV file; ``#`` starts a comment line"""
        entries = []
        with open(path, newline='', encoding='utf-8') as f:
            rows = (line for line in f if line.strip() and not line.lstrip().startswith('#'))
            for line_no, row in enumerate(csv.reader(rows), 1):
                if len(row) != 3:
                    raise GeoDatabaseError(f"{path}: entry {line_no}: expected cidr,lat,lon")
                cidr, lat, lon = (field.strip() for field in row)
                try:
                    entries.append((ipaddress.ip_network(cidr, strict=False), GeoPoint.parse(lat, lon)))
                except ValueError as e:
                    raise GeoDatabaseError(f"{path}: entry {line_no}: {str(e)}")
        logger.info(f"Loaded {len(entries)} geo entries from {path}")
        return cls(entries)

    def lookup(self, ip) -> Optional[GeoPoint]:
        """Location of the longest matching network, or None"""
        try:
            address = ipaddress.ip_address(ip)
        except ValueError:
            return None
        if address.version == 6 and address.ipv4_mapped is not None:
            address = address.ipv4_mapped
        for prefixlen in self._prefixes[address.version]:
            network = ipaddress.ip_network(f"{address}/{prefixlen}", strict=False)
            location = self._tables[(address.version, prefixlen)].get(network)
            if location is not None:
                return location
        return None
