"""
gunicorn entry point: ``gunicorn -w 4 -b 0.0.0.0:8080 server.wsgi:app``

Reads the federation config from FEDGATE_CONFIG. Each worker runs its own
health poller; share resolution results between workers with a memcached L2.
"""

import logging

from server.app import create_app

logging.basicConfig(level=logging.INFO)

app = create_app()
app.extensions['fedgate'].start()
