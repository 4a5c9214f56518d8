import logging
import os
import signal
import threading
from typing import Optional

from flask import Flask, jsonify, request
from werkzeug.serving import WSGIRequestHandler, make_server

from config.settings import resolve_config_path
from server.config import FederationConfig, flask_config, load_config
from server.models.authz import AuthError
from server.models.cache import SharedCache
from server.models.federation import FederationService
from server.models.signer import SigningError
from server.routes import RESERVED_PREFIX, FederatedPathConverter, admin_bp, federation_bp

logger = logging.getLogger(__name__)


class StartupError(RuntimeError):
    """The gateway could not start (bad config, bind failure)"""


def create_app(federation_config: Optional[FederationConfig] = None, config_name: Optional[str] = None,
               shared_cache: Optional[SharedCache] = None,
               federation: Optional[FederationService] = None) -> Flask:
    """Application factory pattern"""

    if config_name is None:
        config_name = os.environ.get('FLASK_ENV', 'production')
    if federation is None:
        if federation_config is None:
            path = resolve_config_path()
            if not path:
                raise StartupError("No federation config: pass one or set FEDGATE_CONFIG")
            federation_config = load_config(path)
        federation = FederationService(federation_config, shared_cache=shared_cache)

    app = Flask(__name__, static_folder=None)
    app.config.from_object(flask_config[config_name])
    app.extensions['fedgate'] = federation
    app.url_map.merge_slashes = False
    app.url_map.converters['fedpath'] = FederatedPathConverter

    # Register blueprints
    app.register_blueprint(admin_bp, url_prefix=RESERVED_PREFIX)
    app.register_blueprint(federation_bp)

    @app.after_request
    def count_request(response):
        federation.metrics.requests.labels(method=request.method,
                                           status=str(response.status_code)).inc()
        return response

    # Error handlers
    @app.errorhandler(AuthError)
    def auth_error(error):
        return jsonify({'error': str(error)}), error.status_code

    @app.errorhandler(SigningError)
    def signing_error(error):
        app.logger.error(f"Error signing redirect: {str(error)}")
        return jsonify({'error': f'Failed to sign redirect: {str(error)}'}), 500

    @app.errorhandler(404)
    def not_found(error):
        return jsonify({'error': 'Not found'}), 404

    @app.errorhandler(405)
    def method_not_allowed(error):
        return jsonify({'error': 'Method not allowed'}), 405

    @app.errorhandler(500)
    def internal_error(error):
        return jsonify({'error': 'Internal server error'}), 500

    return app


class _OneShotHandler(WSGIRequestHandler):
    # close after each response; an idle keep-alive socket would stall the drain
    protocol_version = 'HTTP/1.0'


class GatewayServer:
    """Threaded WSGI server around a Flask app; stop() drains in-flight requests"""

    def __init__(self, app: Flask, host: str, port: int):
        try:
            self._server = make_server(host, port, app, threaded=True, request_handler=_OneShotHandler)
        except OSError as e:
            raise StartupError(f"Cannot bind {host}:{port}: {e.strerror or str(e)}")
        except SystemExit:
            # werkzeug prints the bind error to stderr and exits
            raise StartupError(f"Cannot bind {host}:{port}: address unavailable")
        # join request threads on close instead of abandoning them
        self._server.daemon_threads = False
        self._server.block_on_close = True
        self.host = host
        self.port = self._server.server_port
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, name='fedgate-http',
                                        daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()
        self._thread = None


def serve(federation_config: FederationConfig, listen: Optional[str] = None) -> None:
    """Bind, start the health poller and serve until SIGTERM/SIGINT"""
    address = listen or federation_config.listen_address
    host, port = address.rsplit(':', 1)
    app = create_app(federation_config)
    federation = app.extensions['fedgate']
    try:
        server = GatewayServer(app, host.strip('[]'), int(port))
    except StartupError:
        federation.close()
        raise

    stop = threading.Event()

    def request_stop(signum, frame):
        logger.info(f"Received signal {signum}, shutting down")
        stop.set()

    signal.signal(signal.SIGTERM, request_stop)
    signal.signal(signal.SIGINT, request_stop)

    federation.start()
    server.start()
    logger.info(f"fedgate serving {len(federation.endpoints)} endpoints on {server.url}")
    while not stop.wait(0.5):
        pass
    server.stop()
    federation.close()
    logger.info("fedgate stopped")


if __name__ == '__main__':
    from server.cli import fedgate
    fedgate(['serve'])
