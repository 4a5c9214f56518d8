"""
Pre-signed S3 URLs: AWS Signature Version 4, query-string authorization.

Only the ``host`` header is signed and the payload is always
``UNSIGNED-PAYLOAD``. The signing time is an explicit input so the output is
reproducible.
"""

import datetime
import hashlib
import hmac
import re
import urllib.parse
from dataclasses import dataclass
from typing import List, Optional, Tuple

ALGORITHM = 'AWS4-HMAC-SHA256'
SERVICE = 's3'
UNSIGNED_PAYLOAD = 'UNSIGNED-PAYLOAD'
SIGNED_HEADERS = 'host'
MAX_EXPIRY = 604800
AMZ_DATE_FORMAT = '%Y%m%dT%H%M%SZ'

_REQUIRED_PARAMS = (
    'X-Amz-Algorithm', 'X-Amz-Credential', 'X-Amz-Date',
    'X-Amz-Expires', 'X-Amz-SignedHeaders', 'X-Amz-Signature',
)
_HOST = re.compile(r'^[A-Za-z0-9.\-]+(:\d{1,5})?$|^\[[0-9A-Fa-f:]+\](:\d{1,5})?$')
_SIGNATURE = re.compile(r'^[0-9a-f]{64}$')


class SigningError(ValueError):
    """Raised when a pre-signed URL cannot be produced"""


@dataclass(frozen=True)
class SigningKey:
    access_key: str
    secret_key: str
    region: str
    service: str = SERVICE

    def __post_init__(self):
        if not self.access_key or not self.secret_key:
            raise SigningError("Signing key requires an access key and a secret key")
        if not self.region:
            raise SigningError("Signing key requires a region")


@dataclass(frozen=True)
class PresignRequest:
    method: str
    host: str
    canonical_path: str
    expiry: int
    signing_time: datetime.datetime
    # extra query parameters covered by the signature (e.g. list-type=2)
    query: Tuple[Tuple[str, str], ...] = ()
    scheme: str = 'https'


def _encode(value: str) -> str:
    return urllib.parse.quote(value, safe='-_.~')


def _hmac(key: bytes, msg: str) -> bytes:
    return hmac.new(key, msg.encode('utf-8'), hashlib.sha256).digest()


def _signing_key(secret_key: str, datestamp: str, region: str, service: str) -> bytes:
    k_date = _hmac(f'AWS4{secret_key}'.encode('utf-8'), datestamp)
    k_region = _hmac(k_date, region)
    k_service = _hmac(k_region, service)
    return _hmac(k_service, 'aws4_request')


def _canonical_query(pairs: List[Tuple[str, str]]) -> str:
    """Pairs are already URI-encoded"""
    return '&'.join(f"{k}={v}" for k, v in sorted(pairs))


def _signature(key: SigningKey, method: str, host: str, canonical_uri: str,
               canonical_query: str, amz_date: str, datestamp: str) -> str:
    canonical_request = '\n'.join([
        method,
        canonical_uri,
        canonical_query,
        f'host:{host}\n',
        SIGNED_HEADERS,
        UNSIGNED_PAYLOAD,
    ])
    scope = f'{datestamp}/{key.region}/{key.service}/aws4_request'
    string_to_sign = '\n'.join([
        ALGORITHM,
        amz_date,
        scope,
        hashlib.sha256(canonical_request.encode('utf-8')).hexdigest(),
    ])
    signing_key = _signing_key(key.secret_key, datestamp, key.region, key.service)
    return hmac.new(signing_key, string_to_sign.encode('utf-8'), hashlib.sha256).hexdigest()


def _utc(moment: datetime.datetime) -> datetime.datetime:
    if moment.tzinfo is None:
        return moment.replace(tzinfo=datetime.timezone.utc)
    return moment.astimezone(datetime.timezone.utc)


def presign(key: SigningKey, req: PresignRequest) -> str:
    """Build a pre-signed URL for ``req``; identical inputs give identical URLs"""
    if isinstance(req.expiry, bool) or not isinstance(req.expiry, int):
        raise SigningError(f"Expiry must be an integer number of seconds, got {req.expiry!r}")
    if not 1 <= req.expiry <= MAX_EXPIRY:
        raise SigningError(f"Expiry must be within [1, {MAX_EXPIRY}] seconds, got {req.expiry}")
    if not req.host or not _HOST.match(req.host):
        raise SigningError(f"Malformed host {req.host!r}")
    if not req.canonical_path.startswith('/') or '\x00' in req.canonical_path:
        raise SigningError(f"Malformed path {req.canonical_path!r}")
    if not req.method or not req.method.isalpha():
        raise SigningError(f"Malformed method {req.method!r}")

    signing_time = _utc(req.signing_time)
    amz_date = signing_time.strftime(AMZ_DATE_FORMAT)
    datestamp = signing_time.strftime('%Y%m%d')

    params = [(_encode(k), _encode(v)) for k, v in req.query]
    params.extend([
        ('X-Amz-Algorithm', ALGORITHM),
        ('X-Amz-Credential', _encode(f'{key.access_key}/{datestamp}/{key.region}/{key.service}/aws4_request')),
        ('X-Amz-Date', amz_date),
        ('X-Amz-Expires', str(req.expiry)),
        ('X-Amz-SignedHeaders', SIGNED_HEADERS),
    ])
    canonical_uri = urllib.parse.quote(req.canonical_path, safe='/-_.~')
    canonical_query = _canonical_query(params)
    signature = _signature(key, req.method.upper(), req.host, canonical_uri,
                           canonical_query, amz_date, datestamp)
    return f"{req.scheme}://{req.host}{canonical_uri}?{canonical_query}&X-Amz-Signature={signature}"


def _split_query(raw_query: str) -> Optional[List[Tuple[str, str]]]:
    """Split a raw query string, rejecting anything not in canonical encoding"""
    pairs = []
    for part in raw_query.split('&'):
        if '=' not in part:
            return None
        k, v = part.split('=', 1)
        if _encode(urllib.parse.unquote(k)) != k or _encode(urllib.parse.unquote(v)) != v:
            return None
        pairs.append((k, v))
    return pairs


def verify(key: SigningKey, url: str, now: datetime.datetime, method: str = 'GET') -> bool:
    """True iff the signature recomputes and ``now`` is before the expiry"""
    try:
        parts = urllib.parse.urlsplit(url)
        if not parts.query or not parts.path.startswith('/'):
            return False
        if urllib.parse.quote(urllib.parse.unquote(parts.path), safe='/-_.~') != parts.path:
            return False
        pairs = _split_query(parts.query)
        if pairs is None:
            return False
        params = dict(pairs)
        if len(params) != len(pairs) or any(name not in params for name in _REQUIRED_PARAMS):
            return False

        if params['X-Amz-Algorithm'] != ALGORITHM or params['X-Amz-SignedHeaders'] != SIGNED_HEADERS:
            return False
        credential = urllib.parse.unquote(params['X-Amz-Credential']).split('/')
        if len(credential) != 5:
            return False
        access_key, datestamp, region, service, terminator = credential
        if (access_key != key.access_key or region != key.region
                or service != key.service or terminator != 'aws4_request'):
            return False

        amz_date = params['X-Amz-Date']
        signing_time = datetime.datetime.strptime(amz_date, AMZ_DATE_FORMAT).replace(
            tzinfo=datetime.timezone.utc)
        if signing_time.strftime(AMZ_DATE_FORMAT) != amz_date or not amz_date.startswith(datestamp):
            return False
        expires = params['X-Amz-Expires']
        if not expires.isdigit() or str(int(expires)) != expires or not 1 <= int(expires) <= MAX_EXPIRY:
            return False
        if _utc(now) >= signing_time + datetime.timedelta(seconds=int(expires)):
            return False

        signature = params['X-Amz-Signature']
        if not _SIGNATURE.match(signature):
            return False
        signed = [(k, v) for k, v in pairs if k != 'X-Amz-Signature']
        expected = _signature(key, method.upper(), parts.netloc, parts.path,
                              _canonical_query(signed), amz_date, datestamp)
        return hmac.compare_digest(expected, signature)
    except (ValueError, KeyError):
        return False
