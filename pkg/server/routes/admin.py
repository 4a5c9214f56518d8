from flask import Blueprint, Response, current_app, jsonify

admin_bp = Blueprint('admin', __name__)


@admin_bp.route('/healthz')
def healthz():
    """Liveness of the gateway itself"""
    return jsonify({
        'status': 'healthy',
        'service': 'fedgate'
    })


@admin_bp.route('/status')
def endpoint_status():
    """Per-endpoint health as last published by the poller"""
    federation = current_app.extensions['fedgate']
    endpoints = []
    for state in federation.health.states():
        entry = state.to_dict()
        entry['kind'] = federation.endpoints[state.endpoint_id].kind.value
        endpoints.append(entry)
    return jsonify({
        'success': True,
        'endpoints': endpoints
    }), 200


@admin_bp.route('/metrics')
def metrics():
    """Prometheus text exposition of the gateway counters"""
    federation = current_app.extensions['fedgate']
    return Response(federation.render_metrics(), content_type=federation.metrics.content_type)
