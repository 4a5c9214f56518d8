import time
import urllib.parse
from dataclasses import dataclass
from email.utils import formatdate
from typing import List, Optional, Tuple

from flask import Blueprint, Response, current_app, jsonify, request
from lxml import etree
from werkzeug.routing import PathConverter

from server.config import ConfigError, path_within, validate_prefix
from server.models.authz import (
    ClientIdentity, Forbidden, authenticate, authorize, operation_for_method,
)
from server.models.federation import FederationService
from server.models.geo import GeoPoint
from server.models.locator import ReplicaSet

federation_bp = Blueprint('federation', __name__)

FEDERATION_METHODS = ['GET', 'HEAD', 'PUT', 'DELETE', 'PROPFIND']
RESERVED_PREFIX = '/.well-known/fedgate'
DAV_NS = 'DAV:'
DIRECTORY_CONTENT_TYPE = 'httpd/unix-directory'


class FederatedPathConverter(PathConverter):
    """Matches any path, including the empty one and repeated slashes"""
    regex = '.*'
    part_isolating = False


@dataclass(frozen=True)
class RequestContext:
    method: str
    federated_path: str
    client_ip: str
    identity: ClientIdentity
    received_at: float
    client_location: Optional[GeoPoint] = None


def get_federation() -> FederationService:
    return current_app.extensions['fedgate']


def client_ip(federation: FederationService) -> str:
    """X-Forwarded-For (first address) only when the deployment trusts it"""
    if federation.config.trust_forwarded_for:
        forwarded = request.headers.get('X-Forwarded-For', '')
        first = forwarded.split(',')[0].strip()
        if first:
            return first
    return request.remote_addr or ''


def transport_identity(federation: FederationService) -> Tuple[Optional[str], List[str]]:
    """Subject and attributes established by the TLS terminator, or test headers"""
    if federation.config.insecure_header_auth:
        subject = request.headers.get('X-Fed-Subject')
        if subject:
            attributes = request.headers.get('X-Fed-Attributes', '')
            return subject, [a for a in attributes.split(',') if a.strip()]
    return request.environ.get('SSL_CLIENT_S_DN'), []


def _redirect(url: str, status: int) -> Response:
    response = Response(status=status)
    response.headers['Location'] = url
    return response


def _unresolved(replica_set: ReplicaSet):
    if replica_set.complete:
        return jsonify({'error': 'Not found'}), 404
    return jsonify({'error': 'Replica locations unknown: endpoints did not answer in time'}), 503


def _href(path: str, is_directory: bool) -> str:
    href = urllib.parse.quote(path, safe='/-_.~')
    if is_directory and not href.endswith('/'):
        href += '/'
    return href


def _child_path(parent: str, name: str) -> str:
    return f"/{name}" if parent == '/' else f"{parent}/{name}"


def multistatus(resources) -> bytes:
    """207 body for (path, is_directory, size, modified) tuples"""
    nsmap = {'D': DAV_NS}
    root = etree.Element(f'{{{DAV_NS}}}multistatus', nsmap=nsmap)
    for path, is_directory, size, modified in resources:
        response = etree.SubElement(root, f'{{{DAV_NS}}}response')
        etree.SubElement(response, f'{{{DAV_NS}}}href').text = _href(path, is_directory)
        propstat = etree.SubElement(response, f'{{{DAV_NS}}}propstat')
        prop = etree.SubElement(propstat, f'{{{DAV_NS}}}prop')
        etree.SubElement(prop, f'{{{DAV_NS}}}displayname').text = path.rsplit('/', 1)[-1]
        resourcetype = etree.SubElement(prop, f'{{{DAV_NS}}}resourcetype')
        if is_directory:
            etree.SubElement(resourcetype, f'{{{DAV_NS}}}collection')
        elif size is not None:
            etree.SubElement(prop, f'{{{DAV_NS}}}getcontentlength').text = str(size)
        if modified is not None:
            etree.SubElement(prop, f'{{{DAV_NS}}}getlastmodified').text = formatdate(modified, usegmt=True)
        etree.SubElement(propstat, f'{{{DAV_NS}}}status').text = 'HTTP/1.1 200 OK'
    return etree.tostring(root, xml_declaration=True, encoding='utf-8')


def handle_get(federation: FederationService, ctx: RequestContext):
    """302 to the nearest replica"""
    replica_set = federation.locator.locate(ctx.federated_path)
    if not replica_set.found:
        return _unresolved(replica_set)
    files = [r for r in replica_set.replicas if not r.is_directory]
    if not files:
        return jsonify({'error': f'{ctx.federated_path} is a directory, use PROPFIND'}), 400
    ranked = federation.rank_replicas(files, ctx.client_location)
    if not ranked:
        return jsonify({'error': 'No online replica'}), 503
    best = ranked[0]
    url = federation.endpoints[best.endpoint_id].redirect_url(
        best.backend_path, 'GET', federation.config.presign_expiry)
    return _redirect(url, 302)


def handle_head(federation: FederationService, ctx: RequestContext):
    """Metadata of the nearest replica, answered without a redirect"""
    replica_set = federation.locator.locate(ctx.federated_path)
    if not replica_set.found:
        return _unresolved(replica_set)
    ranked = federation.rank_replicas(replica_set.replicas, ctx.client_location)
    if not ranked:
        return jsonify({'error': 'No online replica'}), 503
    files = [r for r in ranked if not r.is_directory]
    response = Response(status=200)
    response.automatically_set_content_length = False
    if files:
        best = files[0]
        if best.size is not None:
            response.headers['Content-Length'] = str(best.size)
        response.headers['Content-Type'] = 'application/octet-stream'
    else:
        best = ranked[0]
        response.headers['Content-Length'] = '0'
        response.headers['Content-Type'] = DIRECTORY_CONTENT_TYPE
    if best.modified is not None:
        response.headers['Last-Modified'] = formatdate(best.modified, usegmt=True)
    return response


def handle_propfind(federation: FederationService, ctx: RequestContext):
    """207 multistatus for the resource and, at Depth 1, the merged children"""
    depth = request.headers.get('Depth', 'infinity').strip().lower()
    if depth not in ('0', '1'):
        return jsonify({'error': f'Depth {depth} is not supported'}), 403

    path = ctx.federated_path
    replica_set = federation.locator.locate(path)
    virtual = federation.locator.is_virtual_directory(path)
    if not replica_set.found and not virtual:
        return _unresolved(replica_set)

    ranked = federation.rank_replicas(replica_set.replicas, ctx.client_location)
    files = [r for r in ranked if not r.is_directory]
    is_directory = virtual or any(r.is_directory for r in ranked)
    if not is_directory and not files:
        return jsonify({'error': 'No online replica'}), 503
    if is_directory:
        resources = [(path, True, None, None)]
        if depth == '1':
            merged = federation.locator.merged_listing(path)
            resources.extend(
                (_child_path(path, entry.name), entry.is_directory, entry.size, None)
                for entry in merged.listing.entries
            )
    else:
        best = files[0]
        resources = [(path, False, best.size, best.modified)]

    return Response(multistatus(resources), status=207, content_type='text/xml; charset="utf-8"')


def handle_put(federation: FederationService, ctx: RequestContext):
    """307 to a signed upload URL on the nearest writable endpoint"""
    targets = federation.write_targets(ctx.federated_path, ctx.client_location)
    if not targets:
        return jsonify({'error': 'No writable endpoint online'}), 503
    endpoint, backend_path = targets[0]
    url = endpoint.redirect_url(backend_path, 'PUT', federation.config.presign_expiry)
    federation.locator.invalidate(ctx.federated_path)
    current_app.logger.info(f"PUT {ctx.federated_path} by {ctx.identity.subject} -> {endpoint.id}")
    return _redirect(url, 307)


def handle_delete(federation: FederationService, ctx: RequestContext):
    """307 to a signed DELETE URL on the nearest replica"""
    replica_set = federation.locator.locate(ctx.federated_path)
    if not replica_set.found:
        return _unresolved(replica_set)
    files = [r for r in replica_set.replicas if not r.is_directory]
    if not files:
        return jsonify({'error': f'{ctx.federated_path} is a directory'}), 409
    ranked = federation.rank_replicas(files, ctx.client_location)
    if not ranked:
        return jsonify({'error': 'No online replica'}), 503
    best = ranked[0]
    url = federation.endpoints[best.endpoint_id].redirect_url(
        best.backend_path, 'DELETE', federation.config.presign_expiry)
    federation.locator.invalidate(ctx.federated_path)
    current_app.logger.info(f"DELETE {ctx.federated_path} by {ctx.identity.subject} -> {best.endpoint_id}")
    return _redirect(url, 307)


HANDLERS = {
    'GET': handle_get,
    'HEAD': handle_head,
    'PROPFIND': handle_propfind,
    'PUT': handle_put,
    'DELETE': handle_delete,
}


@federation_bp.route('/', defaults={'subpath': ''}, methods=FEDERATION_METHODS)
@federation_bp.route('/<fedpath:subpath>', methods=FEDERATION_METHODS)
def federated_resource(subpath):
    """Authenticate, authorize, then resolve and redirect"""
    federation = get_federation()
    try:
        path = validate_prefix(request.path)
    except ConfigError as e:
        return jsonify({'error': f'Invalid path: {str(e)}'}), 400
    if path_within(path, RESERVED_PREFIX):
        return jsonify({'error': 'Not found'}), 404

    op = operation_for_method(request.method)
    subject, attributes = transport_identity(federation)
    identity = authenticate(subject, attributes, federation.registry)
    if not authorize(identity, op, path, federation.config.scratch_prefix):
        raise Forbidden(f"{op.value} on {path} is not permitted for {identity.subject}")

    ip = client_ip(federation)
    ctx = RequestContext(
        method=request.method,
        federated_path=path,
        client_ip=ip,
        identity=identity,
        received_at=time.time(),
        client_location=federation.geo.lookup(ip),
    )
    return HANDLERS[request.method](federation, ctx)
